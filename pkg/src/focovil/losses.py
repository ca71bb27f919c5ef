"""Objective terms: cosine similarity, multi-view contrastive loss, focal weights,
focalized contrastive loss, per-frame reconstruction loss and their combination.

Contrastive terms work on a block of projected embeddings shaped
``(V, I, d)``: view ``u``, scene ``i``.  Every present ``(u, i)`` is an anchor;
for each other present view ``v`` of the same scene the anchor contributes one
term whose positive is ``(v, i)`` and whose negatives are ``(u, j)`` and
``(v, j)`` for ``j != i``.  Terms are summed over ``v`` and averaged over
anchors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import EPS, ShapeMismatch, Tensor


class BatchTooSmall(ValueError):
    pass


@dataclass
class LossConfig:
    tau: float = 0.5
    alpha: float = 1.0
    beta: float = 1.0
    focalize: bool = True
    stop_grad_weights: bool = False

    def validate(self):
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be non-negative")
        return self


@dataclass
class ContrastiveBatch:
    """``embeddings`` is (V, I, d); ``present[u, i]`` says whether scene i has view u."""

    embeddings: Tensor
    present: np.ndarray | None = None
    scene_ids: np.ndarray | None = None

    def __post_init__(self):
        e = ad.as_tensor(self.embeddings)
        if e.ndim != 3:
            raise ShapeMismatch(f"embeddings must be (V, I, d), got {e.shape}")
        self.embeddings = e
        V, I = e.shape[:2]
        if self.present is None:
            self.present = np.ones((V, I), dtype=bool)
        self.present = np.asarray(self.present, dtype=bool)
        if self.present.shape != (V, I):
            raise ShapeMismatch(f"present mask {self.present.shape} vs embeddings {(V, I)}")
        if I < 2:
            raise BatchTooSmall(f"need at least 2 scenes per batch, got {I}")

    @property
    def n_views(self):
        return self.embeddings.shape[0]

    @property
    def n_scenes(self):
        return self.embeddings.shape[1]


# ---------------------------------------------------------------- pairwise similarity

def cosine_r(a, b):
    """Cosine similarity along the last axis with norms floored at EPS."""
    a, b = ad.as_tensor(a), ad.as_tensor(b)
    na = ad.l2_norm(a, axis=-1, floor=EPS)
    nb = ad.l2_norm(b, axis=-1, floor=EPS)
    return ad.sum_(a * b, axis=-1) / (na * nb)


def similarity_S(a, b, tau):
    return ad.exp(cosine_r(a, b) / tau)


def _pairwise_cosines(batch):
    """cos[u, i, v, j] between every pair of embeddings in the block."""
    e = batch.embeddings
    V, I, d = e.shape
    unit = e / ad.l2_norm(e, axis=-1, keepdims=True, floor=EPS)
    flat = ad.reshape(unit, (V * I, d))
    return ad.reshape(flat @ ad.transpose(flat), (V, I, V, I))


class _Terms:
    """Shared pieces of the contrastive objective for one batch."""

    def __init__(self, batch, tau):
        V, I = batch.n_views, batch.n_scenes
        present = batch.present
        cos = _pairwise_cosines(batch)
        eye = np.eye(I, dtype=cos.dtype)
        vv = np.eye(V, dtype=cos.dtype)
        # positive cosine cos[u, i, v, i]
        self.pos = ad.sum_(cos * eye[None, :, None, :], axis=3)
        # same-view row cos[u, i, u, j], repeated for each partner view v
        same = ad.sum_(cos * vv[:, None, :, None], axis=2)
        same = ad.reshape(same, (V, I, 1, I)) + np.zeros((1, 1, V, 1), dtype=cos.dtype)
        self.neg_cos = ad.concat([same, cos], axis=3)  # (V, I, V, 2I)

        off = ~np.eye(I, dtype=bool)
        same_ok = present[:, None, None, :] & off[None, :, None, :]  # (u, i, -, j)
        cross_ok = present[None, None, :, :] & off[None, :, None, :]  # (-, i, v, j)
        self.neg_mask = np.concatenate([np.broadcast_to(same_ok, (V, I, V, I)),
                                        np.broadcast_to(cross_ok, (V, I, V, I))], axis=3)
        self.term_mask = (present[:, :, None] & present.T[None, :, :]
                          & ~np.eye(V, dtype=bool)[:, None, :])
        n_neg = self.neg_mask.sum(axis=3)
        self.term_mask &= n_neg > 0
        # rows that cannot form a term still need one entry so the log-sum-exp stays finite
        mask = self.neg_mask.copy()
        mask[n_neg == 0] = True
        self.n_neg = np.maximum(n_neg, 1)
        self.log_den = ad.logsumexp(self.neg_cos / tau, axis=3, mask=mask)
        self.log_pos = self.pos / tau
        self.anchors = present.sum()
        self.tau = tau

    def reduce(self, per_term):
        tm = self.term_mask.astype(per_term.dtype)
        return ad.sum_(per_term * tm) / float(self.anchors)


def contrastive_loss_Lc(batch, cfg, use_positive=True, use_negative=True):
    """Multi-view InfoNCE; the ``use_*`` switches drop the positive or negative part."""
    if batch.n_scenes < 2:
        raise BatchTooSmall("need at least 2 scenes")
    t = _Terms(batch, cfg.tau)
    per = 0.0
    if use_positive:
        per = per - t.log_pos
    if use_negative:
        per = per + t.log_den
    return t.reduce(per)


def _weights(t, stop_grad):
    pos = t.pos.detach() if stop_grad else t.pos
    neg_cos = t.neg_cos.detach() if stop_grad else t.neg_cos
    w_plus = ad.sigmoid(1.0 - pos)
    nm = t.neg_mask.astype(neg_cos.data.dtype)
    w_minus = ad.sigmoid(ad.sum_((neg_cos + 1.0) * nm, axis=3) / t.n_neg.astype(nm.dtype))
    return w_plus, w_minus


def focal_weights(batch, cfg):
    """(w_plus, w_minus), each (V, I, V) indexed [anchor view, scene, partner view].

    Entries where the anchor and partner view coincide are meaningless.
    """
    t = _Terms(batch, cfg.tau)
    return _weights(t, cfg.stop_grad_weights)


def focalized_loss_Lfc(batch, cfg, _force_weights=None):
    if batch.n_scenes < 2:
        raise BatchTooSmall("need at least 2 scenes")
    t = _Terms(batch, cfg.tau)
    if _force_weights is None:
        w_plus, w_minus = _weights(t, cfg.stop_grad_weights)
    else:
        w_plus, w_minus = _force_weights
    per = w_minus * t.log_den - w_plus * t.log_pos
    return t.reduce(per)


def reconstruction_loss_Lr(pred, target):
    """Mean over frames (and sequences) of the per-frame Euclidean error."""
    pred, target = ad.as_tensor(pred), ad.as_tensor(target, pred)
    if pred.shape != target.shape:
        raise ShapeMismatch(f"prediction {pred.shape} vs target {target.shape}")
    return ad.mean(ad.l2_norm(pred - target, axis=-1))


def contrastive_term(batch, cfg, use_positive=True, use_negative=True):
    if cfg.focalize and use_positive and use_negative:
        return focalized_loss_Lfc(batch, cfg)
    return contrastive_loss_Lc(batch, cfg, use_positive, use_negative)


def total_objective(batch, pred, target, cfg, use_positive=True, use_negative=True):
    """alpha * (L_fc or L_c) + beta * L_r; returns (total, contrastive, reconstruction)."""
    zero = Tensor(np.zeros((), dtype=ad.as_tensor(pred).dtype))
    lc = contrastive_term(batch, cfg, use_positive, use_negative) if cfg.alpha > 0 and batch is not None else zero
    lr = reconstruction_loss_Lr(pred, target) if cfg.beta > 0 else zero
    return cfg.alpha * lc + cfg.beta * lr, lc, lr
