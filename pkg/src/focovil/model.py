"""Shared recurrent auto-encoder: bidirectional GRU encoder, projection net, zero-input decoder."""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeMismatch, Tensor


@dataclass
class ModelConfig:
    input_dim: int
    hidden: int = 64
    layers: int = 3
    # None means half the latent width (squeeze then excite)
    proj_mid: int | None = None
    dec_hidden: int | None = None
    seed: int = 0
    dtype: str = "float32"

    @property
    def latent_dim(self):
        return 2 * self.hidden

    @property
    def mid(self):
        return self.proj_mid if self.proj_mid is not None else self.latent_dim // 2

    @property
    def dec_h(self):
        return self.dec_hidden if self.dec_hidden is not None else self.hidden


class ModelParams:
    """Named parameter tensors plus the config that shaped them."""

    def __init__(self, config, tensors):
        self.config = config
        self.tensors = tensors

    def __getitem__(self, name):
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors.items())

    def names(self):
        return list(self.tensors)

    def zero_grad(self):
        for t in self.tensors.values():
            t.grad = None

    def copy(self):
        return ModelParams(ModelConfig(**asdict(self.config)),
                           {k: ad.parameter(v.data, k, v.dtype) for k, v in self.tensors.items()})

    def arrays(self):
        return {k: v.data for k, v in self.tensors.items()}

    def gru(self, prefix):
        return {k: self.tensors[f"{prefix}.{k}"] for k in ("W", "U", "b")}


def _uniform(rng, shape, fan_in, dtype):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def init_params(config):
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([config.seed, 7])))
    dt = np.dtype(config.dtype)
    h, d = config.hidden, config.latent_dim
    shapes = {}
    d_in = config.input_dim
    for layer in range(config.layers):
        for direction in ("fwd", "bwd"):
            p = f"enc.{layer}.{direction}"
            shapes[f"{p}.W"] = ((d_in, 3 * h), d_in)
            shapes[f"{p}.U"] = ((h, 3 * h), h)
            shapes[f"{p}.b"] = ((3 * h,), h)
        d_in = 2 * h
    m = config.mid
    shapes["proj.W1"] = ((d, m), d)
    shapes["proj.b1"] = ((m,), d)
    shapes["proj.W2"] = ((m, d), m)
    shapes["proj.b2"] = ((d,), m)
    hd = config.dec_h
    shapes["dec.adapt.W"] = ((d, hd), d)
    shapes["dec.adapt.b"] = ((hd,), d)
    shapes["dec.cell.W"] = ((config.input_dim, 3 * hd), config.input_dim)
    shapes["dec.cell.U"] = ((hd, 3 * hd), hd)
    shapes["dec.cell.b"] = ((3 * hd,), hd)
    shapes["dec.out.W"] = ((hd, config.input_dim), hd)
    shapes["dec.out.b"] = ((config.input_dim,), hd)
    tensors = {name: ad.parameter(_uniform(rng, shape, fan, dt), name, dt) for name, (shape, fan) in shapes.items()}
    return ModelParams(config, tensors)


# ---------------------------------------------------------------- GRU

def _gru_step(xzr, xh, h, Uzr, Uh, width):
    zr = ad.sigmoid(xzr + h @ Uzr)
    z = zr[:, :width]
    r = zr[:, width:]
    cand = ad.tanh(xh + (r * h) @ Uh)
    return h + z * (cand - h)


def gru_cell(x_t, h_prev, p):
    """One GRU update with fused gate weights ``W`` (d_in, 3h), ``U`` (h, 3h), ``b`` (3h,).

    Column blocks are ordered update, reset, candidate.
    """
    W, U, b = p["W"], p["U"], p["b"]
    width = U.shape[0]
    if x_t.shape[-1] != W.shape[0] or h_prev.shape[-1] != width or U.shape[1] != 3 * width:
        raise ShapeMismatch(f"gru_cell: x {x_t.shape}, h {h_prev.shape}, W {W.shape}, U {U.shape}")
    xw = x_t @ W + b
    return _gru_step(xw[:, : 2 * width], xw[:, 2 * width:], h_prev,
                     U[:, : 2 * width], U[:, 2 * width:], width)


def _run_direction(inp, p, reverse, keep_outputs):
    """Unroll one GRU over (B, T, d_in); returns (outputs in time order or None, final state)."""
    W, U, b = p["W"], p["U"], p["b"]
    B, T, width = inp.shape[0], inp.shape[1], U.shape[0]
    # time-major so per-step slices are contiguous
    xw = ad.transpose(inp @ W + b, (1, 0, 2))
    h = Tensor(np.zeros((B, width), dtype=W.dtype))
    steps = range(T - 1, -1, -1) if reverse else range(T)
    outs = []
    for t in steps:
        h = ad.gru_step(xw[t], h, U)
        if keep_outputs:
            outs.append(h)
    if keep_outputs and reverse:
        outs.reverse()
    return (ad.stack(outs, axis=1) if keep_outputs else None), h


def _as_batch(x, params):
    if isinstance(x, Tensor):
        return x
    x = np.asarray(x)
    if x.ndim == 2:
        x = x[None]
    if x.ndim == 4:  # (B, T, N, 3)
        x = x.reshape(x.shape[0], x.shape[1], -1)
    return Tensor(x.astype(params.config.dtype, copy=False))


def encode(x, params):
    """Latent code f_e(X): final forward state at t=T joined with final backward state at t=1.

    ``x`` is (B, T, 3N), (T, 3N) or (B, T, N, 3).
    """
    x = _as_batch(x, params)
    cfg = params.config
    if x.ndim != 3 or x.shape[2] != cfg.input_dim:
        raise ShapeMismatch(f"encode expects (B, T, {cfg.input_dim}), got {x.shape}")
    inp = x
    for layer in range(cfg.layers):
        top = layer == cfg.layers - 1
        out_f, h_f = _run_direction(inp, params.gru(f"enc.{layer}.fwd"), False, not top)
        out_b, h_b = _run_direction(inp, params.gru(f"enc.{layer}.bwd"), True, not top)
        if top:
            return ad.concat([h_f, h_b], axis=-1)
        inp = ad.concat([out_f, out_b], axis=-1)
    raise ValueError("model has no encoder layers")


def project(z, params):
    if z.shape[-1] != params.config.latent_dim:
        raise ShapeMismatch(f"project expects width {params.config.latent_dim}, got {z.shape}")
    hid = ad.tanh(z @ params["proj.W1"] + params["proj.b1"])
    return hid @ params["proj.W2"] + params["proj.b2"]


def decode(z, T, params):
    """Unroll the decoder for ``T`` steps from state adapt(z), feeding a zero frame each step."""
    if z.shape[-1] != params["dec.adapt.W"].shape[0]:
        raise ShapeMismatch(f"decode expects width {params['dec.adapt.W'].shape[0]}, got {z.shape}")
    p = params.gru("dec.cell")
    B = z.shape[0]
    h = z @ params["dec.adapt.W"] + params["dec.adapt.b"]
    zero = Tensor(np.zeros((B, params.config.input_dim), dtype=z.dtype))
    xw = zero @ p["W"] + p["b"]
    outs = []
    for _ in range(T):
        h = ad.gru_step(xw, h, p["U"])
        outs.append(h)
    hs = ad.stack(outs, axis=1)
    return hs @ params["dec.out.W"] + params["dec.out.b"]


def forward(x, params, use_projection=True):
    """Encode, project and reconstruct a batch; returns (latent, projected, reconstruction).

    With ``use_projection=False`` the projection net is bypassed and the
    latent code goes straight to the contrastive loss and the decoder.
    """
    x = _as_batch(x, params)
    z = encode(x, params)
    zp = project(z, params) if use_projection else z
    return z, zp, decode(zp, x.shape[1], params)


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(path, params, extra=None):
    """Write parameters (plus optional named arrays and JSON metadata) to an ``.npz`` file.

    Layout: ``param/<name>`` arrays, ``state/<name>`` arrays from ``extra['arrays']``
    and a ``meta`` entry holding UTF-8 JSON with the model config and ``extra['meta']``.
    """
    extra = extra or {}
    meta = {"format": "focovil-checkpoint/1", "model": asdict(params.config), **extra.get("meta", {})}
    payload = {f"param/{k}": v.data for k, v in params.tensors.items()}
    payload.update({f"state/{k}": np.asarray(v) for k, v in extra.get("arrays", {}).items()})
    payload["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    # fixed entry timestamps keep identical runs byte-identical (np.savez stamps wall time)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for key, arr in payload.items():
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arr), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(key + ".npy", date_time=(1980, 1, 1, 0, 0, 0)), buf.getvalue())


def load_checkpoint(path):
    """Returns (params, meta, state_arrays)."""
    with np.load(path) as z:
        meta = json.loads(bytes(z["meta"]).decode())
        config = ModelConfig(**meta["model"])
        tensors = {}
        state = {}
        for key in z.files:
            if key.startswith("param/"):
                name = key[len("param/"):]
                tensors[name] = ad.parameter(z[key], name, z[key].dtype)
            elif key.startswith("state/"):
                state[key[len("state/"):]] = z[key]
    expected = init_params(config).names()
    if sorted(expected) != sorted(tensors):
        raise ShapeMismatch("checkpoint parameter set does not match its model config")
    return ModelParams(config, {k: tensors[k] for k in expected}), meta, state
