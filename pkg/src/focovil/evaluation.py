"""Downstream evaluation of frozen latent codes f_e(X).

Only encoder outputs are evaluated; the projection net is never applied here.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from . import autodiff as ad
from .model import encode
from .skeleton import stack_frames
from .training import AdamState, adam_step


class EmptyTrainSet(ValueError):
    pass


class TooFewRows(ValueError):
    pass


class LengthMismatch(ValueError):
    pass


class LabelOutOfRange(ValueError):
    pass


@dataclass
class EmbeddingSet:
    Z: np.ndarray
    scene_ids: np.ndarray
    view_ids: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.Z = np.asarray(self.Z, dtype=np.float64)
        if self.Z.ndim != 2:
            self.Z = self.Z.reshape(len(self.scene_ids), -1)
        self.scene_ids = np.asarray(self.scene_ids, dtype=np.int64)
        self.view_ids = np.asarray(self.view_ids, dtype=np.int64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        n = len(self.Z)
        if not (len(self.scene_ids) == len(self.view_ids) == len(self.labels) == n):
            raise LengthMismatch("embedding metadata lengths disagree")
        if not np.all(np.isfinite(self.Z)):
            raise ValueError("embeddings contain non-finite values")

    def __len__(self):
        return len(self.Z)

    def select(self, mask):
        mask = np.asarray(mask)
        return EmbeddingSet(self.Z[mask], self.scene_ids[mask], self.view_ids[mask], self.labels[mask])


def extract_embeddings(corpus, params, batch_size=256):
    seqs = corpus.sequences
    if any(s.class_label is None for s in seqs):
        raise ValueError("evaluation needs a class label on every sequence")
    rows = []
    for lo in range(0, len(seqs), batch_size):
        chunk = seqs[lo:lo + batch_size]
        rows.append(encode(stack_frames(chunk), params).data)
    d = params.config.latent_dim
    Z = np.concatenate(rows) if rows else np.zeros((0, d))
    return EmbeddingSet(Z, [s.scene_id for s in seqs], [s.view_id for s in seqs], [s.class_label for s in seqs])


def cross_view_split(emb, held_out_view):
    test = emb.view_ids == held_out_view
    if not test.any():
        raise ValueError(f"no rows with view_id={held_out_view}")
    return emb.select(~test), emb.select(test)


def scene_disjoint_split(emb, test_fraction=0.5, seed=0):
    scenes = np.unique(emb.scene_ids)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 13])))
    test_scenes = rng.choice(scenes, size=max(1, int(round(test_fraction * len(scenes)))), replace=False)
    test = np.isin(emb.scene_ids, test_scenes)
    return emb.select(~test), emb.select(test)


# ---------------------------------------------------------------- classifiers

def _unit_rows(Z):
    return Z / np.maximum(np.linalg.norm(Z, axis=1, keepdims=True), ad.EPS)


def one_nn_predict(train, test):
    if len(train) == 0:
        raise EmptyTrainSet("1-NN needs at least one training row")
    sim = _unit_rows(test.Z) @ _unit_rows(train.Z).T
    # argmax returns the first maximum, i.e. the lowest training index on ties
    return train.labels[np.argmax(sim, axis=1)]


def one_nn_accuracy(train, test):
    if len(test) == 0:
        return float("nan")
    return float(np.mean(one_nn_predict(train, test) == test.labels))


@dataclass
class ProbeConfig:
    lr: float = 1e-3
    epochs: int = 300
    seed: int = 0


def linear_probe(train, test, cfg=None, return_model=False):
    """Softmax regression on frozen embeddings, full-batch Adam; returns test accuracy."""
    cfg = cfg or ProbeConfig()
    if len(train) == 0:
        raise EmptyTrainSet("linear probe needs training rows")
    n_classes = int(max(train.labels.max(), test.labels.max() if len(test) else 0)) + 1
    d = train.Z.shape[1]
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([cfg.seed, 17])))
    bound = 1.0 / np.sqrt(d)
    W = ad.parameter(rng.uniform(-bound, bound, (d, n_classes)), "W")
    b = ad.parameter(np.zeros(n_classes), "b")
    X = ad.Tensor(train.Z)
    state = AdamState.zeros_like({"W": W.data, "b": b.data})
    losses = []
    for _ in range(cfg.epochs):
        W.grad = b.grad = None
        loss = ad.cross_entropy(X @ W + b, train.labels)
        loss.backward()
        adam_step({"W": W.data, "b": b.data}, {"W": W.grad, "b": b.grad}, state, cfg.lr)
        losses.append(loss.item())
    acc = float(np.mean(np.argmax(test.Z @ W.data + b.data, axis=1) == test.labels)) if len(test) else float("nan")
    if return_model:
        return acc, (W.data, b.data, losses)
    return acc


# ---------------------------------------------------------------- clustering

@dataclass
class ClusterResult:
    assign: np.ndarray
    centers: np.ndarray
    trajectory: list = field(default_factory=list)
    iterations: int = 0


def _rng(seed, tag):
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, tag])))


def _sq_dists(X, C):
    d = (X * X).sum(1)[:, None] - 2 * X @ C.T + (C * C).sum(1)[None]
    return np.maximum(d, 0.0)


def kmeans_pp_init(X, k, rng):
    n = len(X)
    centers = [X[rng.integers(n)]]
    d2 = _sq_dists(X, np.array(centers))[:, 0]
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            # fewer distinct points than clusters: fall back to uniform choice
            idx = rng.integers(n)
        else:
            idx = rng.choice(n, p=d2 / total)
        centers.append(X[idx])
        d2 = np.minimum(d2, _sq_dists(X, X[idx][None])[:, 0])
    return np.array(centers)


def kmeans(X, k, seed=0, max_iter=300, init=None):
    """k-means++ seeding then Lloyd iterations until the assignment stops changing.

    ``trajectory`` holds the within-cluster SSE after every assignment step.
    """
    X = np.asarray(X.Z if isinstance(X, EmbeddingSet) else X, dtype=np.float64)
    n = len(X)
    if n < k:
        raise TooFewRows(f"{n} rows for {k} clusters")
    rng = _rng(seed, 19)
    C = kmeans_pp_init(X, k, rng) if init is None else np.array(init, dtype=np.float64)
    assign = None
    traj = []
    it = 0
    for it in range(1, max_iter + 1):
        d = _sq_dists(X, C)
        new = np.argmin(d, axis=1)
        traj.append(float(d[np.arange(n), new].sum()))
        if assign is not None and np.array_equal(new, assign):
            break
        assign = new
        counts = np.bincount(assign, minlength=k)
        for c in range(k):
            if counts[c]:
                C[c] = X[assign == c].mean(axis=0)
        for c in np.flatnonzero(counts == 0):
            # reseed an empty cluster at the point farthest from its current center
            far = np.argmax(_sq_dists(X, C)[np.arange(n), assign])
            C[c] = X[far]
            assign[far] = c
    return ClusterResult(assign, C, traj, it)


def sse(X, assign, centers):
    X = np.asarray(X, dtype=np.float64)
    return float(((X - centers[assign]) ** 2).sum())


def gmm(X, k, seed=0, max_iter=200, tol=1e-6, var_floor=1e-6):
    """Diagonal-covariance EM started from k-means; hard-assigns by responsibility.

    ``trajectory`` holds the mean per-row log-likelihood before every M-step.
    """
    X = np.asarray(X.Z if isinstance(X, EmbeddingSet) else X, dtype=np.float64)
    n, d = X.shape
    if n < k:
        raise TooFewRows(f"{n} rows for {k} components")
    km = kmeans(X, k, seed)
    resp = np.zeros((n, k))
    resp[np.arange(n), km.assign] = 1.0
    means, var, weights = _m_step(X, resp, var_floor)
    traj = []
    it = 0
    for it in range(1, max_iter + 1):
        log_p = _log_joint(X, means, var, weights)
        norm = logsumexp(log_p, axis=1)
        ll = float(norm.mean())
        resp = np.exp(log_p - norm[:, None])
        traj.append(ll)
        if len(traj) > 1 and abs(traj[-1] - traj[-2]) < tol:
            break
        means, var, weights = _m_step(X, resp, var_floor)
    assign = np.argmax(resp, axis=1)
    out = ClusterResult(assign, means, traj, it)
    out.variances, out.weights = var, weights
    return out


def _m_step(X, resp, var_floor):
    nk = resp.sum(axis=0) + 1e-300
    means = (resp.T @ X) / nk[:, None]
    var = np.stack([resp[:, c] @ (X - means[c]) ** 2 for c in range(resp.shape[1])]) / nk[:, None]
    var = np.maximum(var, var_floor)
    return means, var, nk / len(X)


def _log_joint(X, means, var, weights):
    d = X.shape[1]
    log_det = np.log(var).sum(axis=1)
    maha = ((X[:, None, :] - means[None]) ** 2 / var[None]).sum(axis=2)
    return np.log(weights)[None] - 0.5 * (d * np.log(2 * np.pi) + log_det[None] + maha)


# ---------------------------------------------------------------- partition metrics

def contingency(assign, labels):
    assign = np.asarray(assign)
    labels = np.asarray(labels)
    if assign.shape != labels.shape:
        raise LengthMismatch(f"{assign.shape} assignments vs {labels.shape} labels")
    _, ki = np.unique(assign, return_inverse=True)
    _, li = np.unique(labels, return_inverse=True)
    table = np.zeros((ki.max() + 1 if len(ki) else 0, li.max() + 1 if len(li) else 0), dtype=np.int64)
    np.add.at(table, (ki, li), 1)
    return table


def purity(assign, labels):
    table = contingency(assign, labels)
    return float(table.max(axis=1).sum() / table.sum())


def _pairs(x):
    x = np.asarray(x, dtype=np.float64)
    return x * (x - 1) / 2.0


def ari(assign, labels):
    table = contingency(assign, labels)
    n = table.sum()
    if n < 2:
        raise LengthMismatch("ARI needs at least two samples")
    index = _pairs(table).sum()
    sum_k = _pairs(table.sum(axis=1)).sum()
    sum_l = _pairs(table.sum(axis=0)).sum()
    expected = sum_k * sum_l / _pairs(n)
    top = 0.5 * (sum_k + sum_l) - expected
    if top == 0:
        # both partitions all-in-one or all-singletons
        return 1.0
    return float((index - expected) / top)


def confusion_matrix(pred, true, n_classes):
    pred = np.asarray(pred)
    true = np.asarray(true)
    if pred.shape != true.shape:
        raise LengthMismatch("prediction and label lengths differ")
    if len(pred) and (min(pred.min(), true.min()) < 0 or max(pred.max(), true.max()) >= n_classes):
        raise LabelOutOfRange(f"labels must lie in [0, {n_classes})")
    m = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(m, (true, pred), 1)
    return m


# ---------------------------------------------------------------- report

METRIC_FIELDS = ("one_nn_accuracy", "linear_accuracy", "gmm_purity", "gmm_ari", "kmeans_purity", "kmeans_ari")


def evaluate(train, test, n_classes=None, cluster_seed=0, probe=None, with_probe=True):
    """All metrics on a (train, test) split; clustering runs on the test rows."""
    if n_classes is None:
        n_classes = int(max(train.labels.max(), test.labels.max())) + 1
    k = len(np.unique(test.labels))
    pred = one_nn_predict(train, test)
    g = gmm(test.Z, k, cluster_seed)
    km = kmeans(test.Z, k, cluster_seed)
    report = {
        "one_nn_accuracy": float(np.mean(pred == test.labels)),
        "linear_accuracy": linear_probe(train, test, probe) if with_probe else None,
        "gmm_purity": purity(g.assign, test.labels),
        "gmm_ari": ari(g.assign, test.labels),
        "kmeans_purity": purity(km.assign, test.labels),
        "kmeans_ari": ari(km.assign, test.labels),
        "confusion_matrix": confusion_matrix(pred, test.labels, n_classes).tolist(),
        "n_train": len(train),
        "n_test": len(test),
    }
    return report


def write_report(path, report):
    with open(path, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_embeddings(path, emb):
    """CSV rows: scene_id, view_id, class_label, z0 .. z{d-1}."""
    d = emb.Z.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["scene_id", "view_id", "class_label"] + [f"z{k}" for k in range(d)])
        for z, s, v, l in zip(emb.Z, emb.scene_ids, emb.view_ids, emb.labels):
            w.writerow([int(s), int(v), int(l)] + [repr(float(x)) for x in z])


def read_embeddings(path):
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        next(r)
        rows = [list(map(float, row)) for row in r]
    a = np.array(rows)
    return EmbeddingSet(a[:, 3:], a[:, 0].astype(int), a[:, 1].astype(int), a[:, 2].astype(int))
