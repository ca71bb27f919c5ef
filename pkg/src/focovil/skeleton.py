"""Skeleton data model, normalization, resampling and facing-direction alignment."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

DEGENERATE_TOL = 1e-9


class ZeroExtentSequence(ValueError):
    pass


class SequenceTooShort(ValueError):
    pass


class DegenerateFrame(ValueError):
    pass


@dataclass(frozen=True)
class SkeletonTopology:
    n_joints: int
    root_idx: int = 0
    spine_idx: int = 1
    lhip_idx: int = 2
    rhip_idx: int = 3

    def __post_init__(self):
        idx = (self.root_idx, self.spine_idx, self.lhip_idx, self.rhip_idx)
        if self.n_joints < 1:
            raise ValueError("n_joints must be positive")
        if len(set(idx)) != 4 or not all(0 <= i < self.n_joints for i in idx):
            raise ValueError(f"landmark indices {idx} must be distinct and < {self.n_joints}")


@dataclass(frozen=True)
class ActionSequence:
    """``frames`` is a (T, N, 3) array; ``class_label`` is never read by training."""

    frames: np.ndarray
    scene_id: int
    view_id: int
    class_label: Optional[int] = None

    def __post_init__(self):
        f = np.asarray(self.frames, dtype=np.float64)
        if f.ndim != 3 or f.shape[2] != 3:
            raise ValueError(f"frames must be T x N x 3, got {f.shape}")
        if f.shape[0] < 2:
            raise SequenceTooShort(f"sequence has {f.shape[0]} frame(s), need at least 2")
        if not np.all(np.isfinite(f)):
            raise ValueError("frames contain non-finite coordinates")
        object.__setattr__(self, "frames", f)

    @property
    def length(self):
        return self.frames.shape[0]

    @property
    def n_joints(self):
        return self.frames.shape[1]

    def with_frames(self, frames):
        return replace(self, frames=frames)

    def unlabeled(self):
        return replace(self, class_label=None)


@dataclass
class MultiViewCorpus:
    sequences: list
    n_views: int
    topology: SkeletonTopology
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for s in self.sequences:
            if s.n_joints != self.topology.n_joints:
                raise ValueError("all sequences must share the corpus topology")

    def __len__(self):
        return len(self.sequences)

    def scenes(self):
        """Map scene_id -> {view_id: sequence}, in first-seen order."""
        out = {}
        for s in self.sequences:
            out.setdefault(s.scene_id, {})[s.view_id] = s
        return out

    def check_multiview(self):
        bad = [sid for sid, views in self.scenes().items() if len(views) < 2]
        if bad:
            raise ValueError(f"scenes without a second view: {bad[:5]}")

    def map(self, fn):
        return MultiViewCorpus([fn(s) for s in self.sequences], self.n_views, self.topology, dict(self.meta))

    def subset(self, keep):
        return MultiViewCorpus([s for s in self.sequences if keep(s)], self.n_views, self.topology, dict(self.meta))

    def without_labels(self):
        return self.map(ActionSequence.unlabeled)


def normalize_coordinates(seq):
    """Center each axis on its sequence-wide midrange, then scale uniformly into [-1, 1]."""
    f = seq.frames
    lo = f.min(axis=(0, 1))
    hi = f.max(axis=(0, 1))
    centered = f - (lo + hi) / 2.0
    extent = np.abs(centered).max()
    if extent == 0:
        raise ZeroExtentSequence("sequence has zero spatial extent")
    out = centered / extent
    # guard against 1 + ulp after division
    return seq.with_frames(np.clip(out, -1.0, 1.0))


def resample(seq, target_len):
    T = seq.length
    if T < 2:
        raise SequenceTooShort(f"cannot resample a {T}-frame sequence")
    if target_len < 2:
        raise SequenceTooShort(f"target length {target_len} < 2")
    if target_len == T:
        return seq
    pos = np.arange(target_len) * (T - 1) / (target_len - 1)
    lo = np.minimum(np.floor(pos).astype(int), T - 2)
    w = (pos - lo)[:, None, None]
    f = seq.frames
    out = (1.0 - w) * f[lo] + w * f[lo + 1]
    out[0], out[-1] = f[0], f[-1]
    return seq.with_frames(out)


def _unit(v):
    return v / np.linalg.norm(v)


def build_rotation(pose0, topo):
    """Local frame from the first pose: columns (root->spine, hip axis, their cross product)."""
    pose0 = np.asarray(pose0, dtype=np.float64)
    r0 = pose0[topo.spine_idx] - pose0[topo.root_idx]
    if np.linalg.norm(r0) < DEGENERATE_TOL:
        raise DegenerateFrame("spine coincides with root")
    r0h = _unit(r0)
    r1t = pose0[topo.lhip_idx] - pose0[topo.rhip_idx]
    r1 = r1t - np.dot(r1t, r0h) * r0h
    if np.linalg.norm(r1) < DEGENERATE_TOL:
        raise DegenerateFrame("hip axis is parallel to the spine")
    r1h = _unit(r1)
    r2h = _unit(np.cross(r0h, r1h))
    return np.column_stack([r0h, r1h, r2h])


def align_view(seq, topo):
    """Translate frame-0 root to the origin and rotate into the frame-0 body frame."""
    f = seq.frames
    R = build_rotation(f[0], topo)
    # R is orthonormal so its inverse is its transpose; row-vector form x @ R == R^T x
    out = (f - f[0, topo.root_idx]) @ R
    out[0, topo.root_idx] = 0.0
    return seq.with_frames(out)


def preprocess(seq, topo, target_len=50, align=True):
    """Normalize, resample to ``target_len`` frames, then (optionally) align."""
    seq = resample(normalize_coordinates(seq), target_len)
    return align_view(seq, topo) if align else seq


def preprocess_corpus(corpus, target_len=50, align=True):
    return corpus.map(lambda s: preprocess(s, corpus.topology, target_len, align))


def stack_frames(seqs):
    """(B, T, 3N) float array from equal-length sequences."""
    return np.stack([s.frames.reshape(s.length, -1) for s in seqs])
