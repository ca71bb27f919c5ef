import numpy as np
import pytest

from focovil.skeleton import align_view, preprocess_corpus, stack_frames
from focovil.synth import (
    GeneratorConfig,
    InvalidConfig,
    generate_corpus,
    occluded_joints,
    occlusion_noise,
    read_corpus,
    write_corpus,
)


def small(**kw):
    return GeneratorConfig(**{"scenes_per_class": 6, **kw})


def test_standard_corpus_counts():
    corpus = generate_corpus(GeneratorConfig(n_classes=5, scenes_per_class=60, n_views=3))
    assert len(corpus) == 900
    scenes = corpus.scenes()
    assert len(scenes) == 300
    assert all(sorted(v) == [0, 1, 2] for v in scenes.values())


def test_deterministic():
    a, b = generate_corpus(small()), generate_corpus(small())
    for s, t in zip(a.sequences, b.sequences):
        assert s.frames.tobytes() == t.frames.tobytes()
        assert (s.scene_id, s.view_id, s.class_label) == (t.scene_id, t.view_id, t.class_label)


def test_distinct_seeds_differ():
    a, b = generate_corpus(small(rng_seed=1)), generate_corpus(small(rng_seed=2))
    assert not np.array_equal(a.sequences[0].frames, b.sequences[0].frames)


def test_noise_free_views_are_rotations():
    corpus = generate_corpus(small(occlusion_noise_std=0.0, view_offset=0.0))
    for views in corpus.scenes().values():
        x0 = views[0].frames
        for u in (1, 2):
            xu = views[u].frames
            # best orthogonal fit recovers the relative camera rotation exactly
            A, B = x0.reshape(-1, 3), xu.reshape(-1, 3)
            U, _, Vt = np.linalg.svd(A.T @ B)
            R = U @ Vt
            np.testing.assert_allclose(A @ R, B, atol=1e-9)
            assert abs(np.linalg.det(R) - 1) < 1e-9


def test_noise_free_alignment_agrees_across_views():
    corpus = generate_corpus(small(occlusion_noise_std=0.0))
    topo = corpus.topology
    for views in corpus.scenes().values():
        ref = align_view(views[0], topo).frames
        for u in (1, 2):
            np.testing.assert_allclose(align_view(views[u], topo).frames, ref, atol=1e-9)


def test_noise_free_classes_are_separable():
    corpus = generate_corpus(GeneratorConfig(scenes_per_class=20, occlusion_noise_std=0.0))
    data = preprocess_corpus(corpus, 30)
    seqs = [s for s in data.sequences if s.view_id == 0]
    X = stack_frames(seqs).reshape(len(seqs), -1)
    y = np.array([s.class_label for s in seqs])
    scene = np.array([s.scene_id for s in seqs])
    test = scene % 2 == 1
    Xn = X / np.linalg.norm(X, axis=1, keepdims=True)
    pred = y[~test][np.argmax(Xn[test] @ Xn[~test].T, axis=1)]
    assert np.all(pred == y[test])


def test_occlusion_noise_touches_only_occluded_joints():
    clean = generate_corpus(small(occlusion_noise_std=0.0))
    noisy = generate_corpus(small())
    occ = occluded_joints(small())
    for a, b in zip(clean.sequences, noisy.sequences):
        moved = np.flatnonzero(np.abs(a.frames - b.frames).max(axis=(0, 2)) > 0)
        assert set(moved) <= set(occ[a.view_id])


def test_smoothed_noise_has_requested_std():
    cfg = GeneratorConfig(occlusion_noise_std=0.3, occlusion_smoothness=4.0)
    rng = np.random.default_rng(0)
    x = np.concatenate([occlusion_noise(cfg, rng, 30, 5).ravel() for _ in range(400)])
    assert abs(x.std() - 0.3) < 0.01
    white = occlusion_noise(GeneratorConfig(occlusion_noise_std=0.3, occlusion_smoothness=0.0), rng, 30, 5)
    assert white.shape == (30, 5, 3)


@pytest.mark.parametrize("kw", [
    {"n_views": 1, "view_azimuths_deg": [0.0]},
    {"n_joints": 3},
    {"occlusion_noise_std": -0.1},
    {"view_azimuths_deg": [0.0, 10.0]},
    {"class_separation": 1.5},
    {"seq_len": 1},
])
def test_invalid_config(kw):
    with pytest.raises(InvalidConfig):
        generate_corpus(GeneratorConfig(**kw))


def test_serialization_round_trip_is_exact(tmp_path):
    corpus = generate_corpus(small())
    path = tmp_path / "c.jsonl"
    assert write_corpus(corpus, path) == len(corpus)
    back = read_corpus(path)
    assert back.n_views == 3 and back.topology.n_joints == 16
    for s, t in zip(corpus.sequences, back.sequences):
        assert s.frames.tobytes() == t.frames.tobytes()
        assert (s.scene_id, s.view_id, s.class_label) == (t.scene_id, t.view_id, t.class_label)


def test_serialization_bytes_are_stable(tmp_path):
    write_corpus(generate_corpus(small()), tmp_path / "a.jsonl")
    write_corpus(generate_corpus(small()), tmp_path / "b.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()


def test_read_rejects_bad_records(tmp_path):
    p = tmp_path / "bad.jsonl"
    p.write_text('{"scene_id": 0, "view_id": 0}\n')
    with pytest.raises(ValueError, match="bad.jsonl:1"):
        read_corpus(p)
    p.write_text("")
    with pytest.raises(ValueError):
        read_corpus(p)
