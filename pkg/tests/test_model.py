import numpy as np
import pytest

from focovil import autodiff as ad
from focovil.autodiff import ShapeMismatch, Tensor, grad_check
from focovil.losses import reconstruction_loss_Lr
from focovil.model import (
    ModelConfig,
    ModelParams,
    decode,
    encode,
    forward,
    gru_cell,
    init_params,
    load_checkpoint,
    project,
    save_checkpoint,
)
from focovil.training import AdamState, adam_step


def make(input_dim=6, hidden=4, layers=2, dtype="float64", **kw):
    return init_params(ModelConfig(input_dim=input_dim, hidden=hidden, layers=layers, dtype=dtype, **kw))


def zeroed(params):
    for _, t in params:
        t.data[...] = 0.0
    return params


def cell(d_in, h, rng=None):
    if rng is None:
        return {k: Tensor(np.zeros(s)) for k, s in (("W", (d_in, 3 * h)), ("U", (h, 3 * h)), ("b", (3 * h,)))}
    return {"W": Tensor(rng.standard_normal((d_in, 3 * h))), "U": Tensor(rng.standard_normal((h, 3 * h))),
            "b": Tensor(rng.standard_normal(3 * h))}


def test_shapes_and_latent_width():
    p = make(hidden=5, layers=3)
    assert p.config.latent_dim == 10 and p.config.mid == 5
    assert p["enc.0.fwd.W"].shape == (6, 15)
    assert p["enc.1.bwd.W"].shape == (10, 15)
    assert p["proj.W1"].shape == (10, 5) and p["proj.W2"].shape == (5, 10)
    z, zp, rec = forward(np.zeros((2, 7, 6)), p)
    assert z.shape == (2, 10) and zp.shape == (2, 10) and rec.shape == (2, 7, 6)


def test_init_is_seeded_uniform():
    a, b = make(seed=3), make(seed=3)
    for (k, t), (_, u) in zip(a, b):
        np.testing.assert_array_equal(t.data, u.data)
        if t.ndim == 2:
            assert np.abs(t.data).max() <= 1 / np.sqrt(t.shape[0])
    assert not np.array_equal(make(seed=4)["proj.W1"].data, a["proj.W1"].data)


def test_gru_cell_zero_parameters_halves_state():
    h = Tensor(np.array([[1.0, -2.0, 0.5]]))
    out = gru_cell(Tensor(np.ones((1, 2))), h, cell(2, 3))
    np.testing.assert_allclose(out.data, 0.5 * h.data)


def test_gru_cell_saturated_update_gate():
    rng = np.random.default_rng(0)
    p = cell(2, 3, rng)
    p["b"].data[:3] = 10.0
    x = rng.standard_normal((4, 2))
    out = gru_cell(Tensor(x), Tensor(np.zeros((4, 3))), p).data
    want = np.tanh(x @ p["W"].data[:, 6:] + p["b"].data[6:])
    np.testing.assert_allclose(out, want, atol=1e-4)


def test_gru_cell_matches_textbook_equations():
    rng = np.random.default_rng(1)
    p = cell(3, 4, rng)
    x, h = rng.standard_normal((2, 3)), rng.standard_normal((2, 4))
    W, U, b = p["W"].data, p["U"].data, p["b"].data
    sig = lambda v: 1 / (1 + np.exp(-v))  # noqa: E731
    z = sig(x @ W[:, :4] + h @ U[:, :4] + b[:4])
    r = sig(x @ W[:, 4:8] + h @ U[:, 4:8] + b[4:8])
    c = np.tanh(x @ W[:, 8:] + (r * h) @ U[:, 8:] + b[8:])
    np.testing.assert_allclose(gru_cell(Tensor(x), Tensor(h), p).data, (1 - z) * h + z * c, atol=1e-14)


def test_fused_step_equals_composed_cell():
    rng = np.random.default_rng(2)
    p = cell(3, 4, rng)
    x, h = rng.standard_normal((5, 3)), rng.standard_normal((5, 4))
    xw = Tensor(x) @ p["W"] + p["b"]
    np.testing.assert_allclose(ad.gru_step(xw, Tensor(h), p["U"]).data,
                               gru_cell(Tensor(x), Tensor(h), p).data, atol=1e-14)


def test_gru_cell_gradient():
    rng = np.random.default_rng(3)
    x, h = rng.standard_normal((2, 3)), rng.standard_normal((2, 4))
    W, U, b = rng.standard_normal((3, 12)), rng.standard_normal((4, 12)), rng.standard_normal(12)
    rep = grad_check(lambda *a: ad.sum_(ad.tanh(gru_cell(a[0], a[1], {"W": a[2], "U": a[3], "b": a[4]}))),
                     [x, h, W, U, b])
    assert rep.max_rel_error <= 1e-6


def test_gru_cell_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        gru_cell(Tensor(np.ones((1, 5))), Tensor(np.ones((1, 3))), cell(2, 3))


def test_encode_zero_case():
    z = encode(np.zeros((3, 5, 6)), zeroed(make()))
    np.testing.assert_array_equal(z.data, 0.0)


def test_encode_reversal_swaps_direction_blocks():
    p = make(layers=1)
    for k in ("W", "U", "b"):
        p[f"enc.0.bwd.{k}"].data[...] = p[f"enc.0.fwd.{k}"].data
    x = np.random.default_rng(4).standard_normal((2, 6, 6))
    a = encode(x, p).data
    b = encode(x[:, ::-1], p).data
    np.testing.assert_allclose(b, np.concatenate([a[:, 4:], a[:, :4]], axis=1), atol=1e-14)


def test_encode_deterministic_and_accepts_pose_layout():
    p = make()
    x = np.random.default_rng(5).standard_normal((2, 4, 2, 3))
    a, b = encode(x, p).data, encode(x.reshape(2, 4, 6), p).data
    np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(encode(x[0].reshape(4, 6), p).data, a[:1])
    with pytest.raises(ShapeMismatch):
        encode(np.zeros((2, 4, 5)), p)


def test_project_zero_and_hand_case():
    p = zeroed(make(hidden=1, layers=1))
    np.testing.assert_array_equal(project(Tensor(np.ones((1, 2))), p).data, 0.0)
    p["proj.W1"].data[...] = [[1.0], [0.0]]
    p["proj.W2"].data[...] = [[1.0, 0.0]]
    p["proj.b2"].data[...] = [0.0, 0.25]
    out = project(Tensor(np.array([[0.7, -3.0]])), p).data
    np.testing.assert_allclose(out, [[np.tanh(0.7), 0.25]])
    with pytest.raises(ShapeMismatch):
        project(Tensor(np.ones((1, 3))), p)


def test_project_gradient():
    p = make(hidden=3, layers=1)
    names = ["proj.W1", "proj.b1", "proj.W2", "proj.b2"]
    z = np.random.default_rng(6).standard_normal((2, 6))

    def f(zz, *ws):
        q = ModelParams(p.config, {**p.tensors, **dict(zip(names, ws))})
        return ad.sum_(ad.tanh(project(zz, q)))

    rep = grad_check(f, [z] + [p[n].data for n in names])
    assert rep.max_rel_error <= 1e-6


def test_decode_zero_case_and_single_step():
    p = zeroed(make())
    np.testing.assert_array_equal(decode(Tensor(np.zeros((2, 8))), 5, p).data, 0.0)
    p = make()
    z = Tensor(np.random.default_rng(7).standard_normal((2, 8)))
    h0 = z @ p["dec.adapt.W"] + p["dec.adapt.b"]
    step = gru_cell(Tensor(np.zeros((2, 6))), h0, p.gru("dec.cell"))
    want = step @ p["dec.out.W"] + p["dec.out.b"]
    out = decode(z, 1, p)
    assert out.shape == (2, 1, 6)
    np.testing.assert_allclose(out.data[:, 0], want.data, atol=1e-14)


def test_forward_without_projection_feeds_latent_to_decoder():
    p = make()
    x = np.random.default_rng(8).standard_normal((2, 3, 6))
    z, zp, rec = forward(x, p, use_projection=False)
    np.testing.assert_array_equal(z.data, zp.data)
    np.testing.assert_array_equal(rec.data, decode(z, 3, p).data)


def test_toy_reconstruction_overfits():
    p = make(input_dim=6, hidden=16, layers=1, seed=1)
    x = np.random.default_rng(9).uniform(-1, 1, size=(5, 2, 6))
    adam = AdamState.zeros_like(p.arrays())
    arrays = p.arrays()
    loss = None
    for _ in range(2000):
        p.zero_grad()
        _, _, rec = forward(x, p)
        loss = reconstruction_loss_Lr(rec, x)
        if loss.item() < 0.01:
            break
        loss.backward()
        adam_step(arrays, {k: t.grad for k, t in p}, adam, 3e-3)
    assert loss.item() < 0.01


def test_checkpoint_round_trip(tmp_path):
    p = make(dtype="float32", seed=2)
    path = tmp_path / "m.npz"
    save_checkpoint(path, p, {"meta": {"note": "x"}, "arrays": {"extra": np.arange(3)}})
    q, meta, state = load_checkpoint(path)
    assert meta["note"] == "x" and q.config == p.config
    np.testing.assert_array_equal(state["extra"], np.arange(3))
    for (k, t), (k2, u) in zip(p, q):
        assert k == k2 and t.data.dtype == u.data.dtype
        assert t.data.tobytes() == u.data.tobytes()
    save_checkpoint(tmp_path / "again.npz", q, {"meta": {"note": "x"}, "arrays": {"extra": np.arange(3)}})
    assert path.read_bytes() == (tmp_path / "again.npz").read_bytes()

