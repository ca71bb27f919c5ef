"""Minibatches of multi-view scenes, Adam, and the training loop."""

from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteValue, ShapeMismatch
from .losses import ContrastiveBatch, LossConfig, total_objective
from .model import ModelConfig, ModelParams, forward, init_params, load_checkpoint, save_checkpoint
from .skeleton import stack_frames

log = logging.getLogger(__name__)

# Table order, weakest baseline first
ABLATIONS = ("raw_reconst", "align_reconst", "no_g", "no_plus", "no_minus", "covil", "full")


class CorpusTooSmall(ValueError):
    pass


class TrainingAborted(NonFiniteValue):
    def __init__(self, epoch, batch, cause):
        super().__init__(f"non-finite value at epoch {epoch}, batch {batch}: {cause}")
        self.epoch = epoch
        self.batch = batch


@dataclass
class TrainConfig:
    batch_anchors: int = 64
    epochs: int = 200
    lr: float = 1e-4
    lr_decay: float = 0.95
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 5.0
    seed: int = 0
    ablation: str = "full"
    loss: LossConfig = field(default_factory=LossConfig)

    def validate(self):
        if self.batch_anchors < 2:
            raise ValueError("batch_anchors must be >= 2")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not 0 < self.lr_decay <= 1:
            raise ValueError("lr_decay must lie in (0, 1]")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.ablation not in ABLATIONS:
            raise ValueError(f"unknown ablation {self.ablation!r}; choose from {', '.join(ABLATIONS)}")
        self.loss.validate()
        return self


@dataclass(frozen=True)
class Variant:
    """How an ablation changes alignment, objective and architecture."""

    align: bool = True
    contrastive: bool = True
    focalize: bool = False
    use_projection: bool = True
    use_positive: bool = True
    use_negative: bool = True


VARIANTS = {
    "raw_reconst": Variant(align=False, contrastive=False),
    "align_reconst": Variant(contrastive=False),
    "no_g": Variant(use_projection=False),
    "no_plus": Variant(use_positive=False),
    "no_minus": Variant(use_negative=False),
    "covil": Variant(),
    "full": Variant(focalize=True),
}


def loss_config_for(cfg):
    v = VARIANTS[cfg.ablation]
    lc = LossConfig(**asdict(cfg.loss))
    lc.focalize = v.focalize
    if not v.contrastive:
        lc.alpha = 0.0
    return lc


# ---------------------------------------------------------------- batches

def scene_table(corpus):
    """(scene ids, view ids, {scene: {view: sequence}}) with scenes in first-seen order."""
    scenes = corpus.scenes()
    views = sorted({s.view_id for s in corpus.sequences})
    return list(scenes), views, scenes


def sample_batch(corpus, I, rng):
    """I distinct scenes drawn without replacement, each with all of its views."""
    ids, _, scenes = scene_table(corpus)
    if len(ids) < I:
        raise CorpusTooSmall(f"corpus has {len(ids)} scenes, batch needs {I}")
    pick = rng.choice(len(ids), size=I, replace=False)
    return [scenes[ids[k]] for k in pick]


def batch_arrays(groups, views, dtype):
    """Stack scene groups into X (V, I, T, D) plus the presence mask (V, I)."""
    first = next(iter(groups[0].values()))
    T, D = first.length, first.n_joints * 3
    X = np.zeros((len(views), len(groups), T, D), dtype=dtype)
    present = np.zeros((len(views), len(groups)), dtype=bool)
    for i, g in enumerate(groups):
        for u, vid in enumerate(views):
            if vid in g:
                X[u, i] = stack_frames([g[vid]])[0]
                present[u, i] = True
    return X, present


# ---------------------------------------------------------------- Adam

@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, arrays, beta1=0.9, beta2=0.999, eps=1e-8):
        return cls({k: np.zeros_like(a) for k, a in arrays.items()},
                   {k: np.zeros_like(a) for k, a in arrays.items()}, 0, beta1, beta2, eps)


def adam_step(params, grads, state, lr):
    """Bias-corrected Adam update of the arrays in ``params`` (in place)."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for k, p in params.items():
        g = grads.get(k)
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise ShapeMismatch(f"gradient for {k} has shape {g.shape}, parameter {p.shape}")
        m, v = state.m[k], state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype, copy=False)
    return params, state


def clip_global_norm(grads, max_norm):
    total = float(np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values())))
    if max_norm and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads.values():
            g *= scale
    return total


# ---------------------------------------------------------------- training loop

@dataclass
class TrainResult:
    params: ModelParams
    log: list
    adam: AdamState
    rng_state: dict
    epochs_done: int


def _pair_stats(zp, present):
    """Mean cosine over positive (same scene, other view) and negative (other scene) pairs."""
    e = zp.data.astype(np.float64)
    V, I, d = e.shape
    unit = e / np.maximum(np.linalg.norm(e, axis=-1, keepdims=True), ad.EPS)
    flat = unit.reshape(V * I, d)
    cos = (flat @ flat.T).reshape(V, I, V, I)
    ok = present[:, :, None, None] & present[None, None, :, :]
    same_scene = np.eye(I, dtype=bool)[None, :, None, :]
    same_view = np.eye(V, dtype=bool)[:, None, :, None]
    pos = ok & same_scene & ~same_view
    neg = ok & ~same_scene
    return cos[pos].sum(), pos.sum(), cos[neg].sum(), neg.sum()


def lr_at(cfg, epoch):
    return cfg.lr * cfg.lr_decay ** epoch


def train(corpus, params, cfg, out_dir=None, resume=None, on_epoch=None, meta=None):
    """Train ``params`` in place on a preprocessed corpus.

    ``resume`` is a (AdamState, rng_state, epochs_done, log) tuple from a
    checkpoint.  With ``out_dir`` the latest checkpoint and the running log are
    rewritten after every epoch; ``meta`` is stored alongside in each checkpoint.
    """
    cfg.validate()
    corpus = corpus.without_labels()
    corpus.check_multiview()
    variant = VARIANTS[cfg.ablation]
    lcfg = loss_config_for(cfg)
    ids, views, scenes = scene_table(corpus)
    if len(ids) < 2:
        raise CorpusTooSmall("need at least 2 scenes")

    if resume is None:
        adam = AdamState.zeros_like(params.arrays(), cfg.beta1, cfg.beta2, cfg.eps)
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([cfg.seed, 11])))
        start, history = 0, []
    else:
        adam, rng_state, start, history = resume
        rng = np.random.Generator(np.random.PCG64())
        rng.bit_generator.state = rng_state
        history = list(history)

    dtype = params.config.dtype
    arrays = params.arrays()
    for epoch in range(start, cfg.epochs):
        lr = lr_at(cfg, epoch)
        order = rng.permutation(len(ids))
        sums = np.zeros(5)
        n_batches = 0
        for b, lo in enumerate(range(0, len(order), cfg.batch_anchors)):
            chunk = order[lo:lo + cfg.batch_anchors]
            if len(chunk) < 2:
                continue
            groups = [scenes[ids[k]] for k in chunk]
            X, present = batch_arrays(groups, views, dtype)
            V, I, T, D = X.shape
            params.zero_grad()
            try:
                _, zp, rec = forward(X.reshape(V * I, T, D), params, variant.use_projection)
                emb = ad.reshape(zp, (V, I, zp.shape[-1]))
                rows = np.flatnonzero(present.reshape(-1))
                pred = rec[rows] if len(rows) < V * I else rec
                target = X.reshape(V * I, T, D)[rows]
                batch = ContrastiveBatch(emb, present) if lcfg.alpha > 0 else None
                total, lc, lr_term = total_objective(batch, pred, target, lcfg,
                                                     variant.use_positive, variant.use_negative)
                total.backward()
            except NonFiniteValue as exc:
                raise TrainingAborted(epoch, b, exc) from exc
            grads = {k: t.grad for k, t in params if t.grad is not None}
            clip_global_norm(grads, cfg.clip_norm)
            adam_step(arrays, grads, adam, lr)
            ps, pn, ns, nn = _pair_stats(emb, present)
            sums += [total.item(), lc.item(), lr_term.item(), ps / max(pn, 1), ns / max(nn, 1)]
            n_batches += 1
        means = sums / max(n_batches, 1)
        row = {"epoch": epoch + 1, "lr": lr, "loss": means[0], "L_fc": means[1], "L_r": means[2],
               "pos_r": means[3], "neg_r": means[4]}
        history.append(row)
        log.info("epoch %d lr %.3g loss %.4f L_fc %.4f L_r %.4f pos_r %.3f neg_r %.3f",
                 row["epoch"], lr, row["loss"], row["L_fc"], row["L_r"], row["pos_r"], row["neg_r"])
        result = TrainResult(params, history, adam, rng.bit_generator.state, epoch + 1)
        if out_dir is not None:
            write_run(out_dir, result, cfg, meta)
        if on_epoch is not None:
            on_epoch(result)
    return TrainResult(params, history, adam, rng.bit_generator.state, max(start, cfg.epochs))


# ---------------------------------------------------------------- persistence

def write_log(path, rows):
    with open(path, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def read_log(path):
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def write_run(out_dir, result, cfg, meta=None):
    os.makedirs(out_dir, exist_ok=True)
    save_training_checkpoint(os.path.join(out_dir, "checkpoint.npz"), result, cfg, meta)
    write_log(os.path.join(out_dir, "epochs.jsonl"), result.log)


def save_training_checkpoint(path, result, cfg, meta=None):
    arrays = {f"adam_m/{k}": v for k, v in result.adam.m.items()}
    arrays.update({f"adam_v/{k}": v for k, v in result.adam.v.items()})
    meta = {
        **(meta or {}),
        "train": asdict(cfg),
        "epochs_done": result.epochs_done,
        "adam_step": result.adam.step,
        "rng_state": _jsonable(result.rng_state),
        "log": result.log,
    }
    save_checkpoint(path, result.params, {"meta": meta, "arrays": arrays})


def _jsonable(state):
    # PCG64 state integers exceed 64 bits; JSON ints are arbitrary precision
    return json.loads(json.dumps(state, default=int))


def load_training_checkpoint(path):
    """Returns (params, TrainConfig or None, resume tuple)."""
    params, meta, state = load_checkpoint(path)
    cfg = None
    if "train" in meta:
        t = dict(meta["train"])
        t["loss"] = LossConfig(**t["loss"])
        cfg = TrainConfig(**t)
    m = {k[len("adam_m/"):]: v.copy() for k, v in state.items() if k.startswith("adam_m/")}
    v = {k[len("adam_v/"):]: v.copy() for k, v in state.items() if k.startswith("adam_v/")}
    resume = None
    if m:
        adam = AdamState(m, v, meta["adam_step"], cfg.beta1, cfg.beta2, cfg.eps)
        resume = (adam, meta["rng_state"], meta["epochs_done"], meta.get("log", []))
    return params, cfg, resume


def new_model(corpus, model_cfg):
    """Fresh parameters sized for the corpus' pose dimension."""
    cfg = ModelConfig(**{**asdict(model_cfg), "input_dim": corpus.topology.n_joints * 3})
    return init_params(cfg)


# ---------------------------------------------------------------- ablation

@dataclass
class AblationSettings:
    variants: tuple = ABLATIONS
    seeds: tuple = (0, 1, 2)
    held_out_view: int = 2
    target_len: int = 50
    cluster_seed: int = 0


def run_variant(corpus, model_cfg, cfg, held_out_view, target_len=50, cluster_seed=0):
    """Preprocess, train on the non-held-out views, evaluate 1-NN and GMM purity on the held-out view.

    ``pos_r`` and ``neg_r`` in the row are the mean pair cosines of the first and last epoch.
    """
    from .evaluation import cross_view_split, extract_embeddings, gmm, one_nn_accuracy, purity
    from .skeleton import preprocess_corpus

    variant = VARIANTS[cfg.ablation]
    data = preprocess_corpus(corpus, target_len, align=variant.align)
    train_part = data.subset(lambda s: s.view_id != held_out_view)
    params = new_model(data, model_cfg)
    result = train(train_part, params, cfg)
    emb = extract_embeddings(data, params)
    tr, te = cross_view_split(emb, held_out_view)
    k = len(np.unique(te.labels))
    return {
        "variant": cfg.ablation,
        "seed": cfg.seed,
        "one_nn_accuracy": one_nn_accuracy(tr, te),
        "gmm_purity": purity(gmm(te.Z, k, cluster_seed).assign, te.labels),
        "final_loss": result.log[-1]["loss"] if result.log else None,
        "pos_r": [result.log[0]["pos_r"], result.log[-1]["pos_r"]] if result.log else None,
        "neg_r": [result.log[0]["neg_r"], result.log[-1]["neg_r"]] if result.log else None,
    }, result


def _variant_job(args):
    corpus, model_cfg, cfg, settings = args
    row, _ = run_variant(corpus, model_cfg, cfg, settings.held_out_view, settings.target_len,
                         settings.cluster_seed)
    return row


def run_ablation(corpus, model_cfg, cfg, settings=None, on_row=None, jobs=1):
    """Train every requested variant under every seed with identical data; returns table rows.

    The model initialisation seed follows the training seed so variants under one
    seed start from the same weights.  ``jobs > 1`` spreads runs over worker
    processes; each run is self-contained, so rows are identical either way.
    """
    settings = settings or AblationSettings()
    tasks = []
    for name in settings.variants:
        for seed in settings.seeds:
            vcfg = TrainConfig(**{**asdict(cfg), "loss": LossConfig(**asdict(cfg.loss)),
                                  "ablation": name, "seed": seed})
            mcfg = ModelConfig(**{**asdict(model_cfg), "seed": seed})
            tasks.append((corpus, mcfg, vcfg, settings))
    rows = []
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for row in pool.map(_variant_job, tasks):
                rows.append(row)
                if on_row is not None:
                    on_row(row)
        return rows
    for task in tasks:
        row = _variant_job(task)
        rows.append(row)
        if on_row is not None:
            on_row(row)
    return rows


def summarize_ablation(rows):
    """Per-variant means in table order plus the trend checks."""
    order = [v for v in ABLATIONS if any(r["variant"] == v for r in rows)]
    means = {}
    for v in order:
        sel = [r for r in rows if r["variant"] == v]
        means[v] = {
            "one_nn_accuracy": float(np.mean([r["one_nn_accuracy"] for r in sel])),
            "gmm_purity": float(np.mean([r["gmm_purity"] for r in sel])),
            "n": len(sel),
        }
    return means, trend_checks(means)


def trend_checks(means):
    chain = ["full", "covil", "align_reconst", "raw_reconst"]
    if not all(v in means for v in chain):
        return {}
    acc = {v: means[v]["one_nn_accuracy"] for v in chain}
    pur = {v: means[v]["gmm_purity"] for v in chain}
    return {
        "accuracy_order": acc["full"] >= acc["covil"] >= acc["align_reconst"] >= acc["raw_reconst"],
        "accuracy_full_minus_align_ge_3pp": acc["full"] - acc["align_reconst"] >= 0.03,
        "accuracy_full_minus_raw_ge_8pp": acc["full"] - acc["raw_reconst"] >= 0.08,
        "purity_order": pur["full"] >= pur["covil"] >= pur["align_reconst"] >= pur["raw_reconst"],
    }
