"""Deterministic multi-view skeleton corpus.

Each class is a family of sinusoidal joint trajectories.  A scene jitters the
class template, picks a heading, and is rendered once per camera: rotate about
the vertical (y) axis by the camera azimuth, shift by a camera offset, then add
Gaussian noise to the joints that camera cannot see well.

Randomness comes from numpy's PCG64 bit generator.  Every class, scene and
(scene, view) pair gets its own stream derived with ``SeedSequence`` from
``(rng_seed, stream_tag, index...)``, so scenes can be generated in any order
or in parallel and still agree bit for bit.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .skeleton import ActionSequence, MultiViewCorpus, SkeletonTopology

# pelvis, spine, hips first so the default topology landmarks are 0..3
_REST_POSE = np.array([
    [0.00, 0.00, 0.00],    # 0 pelvis (root)
    [0.00, 0.45, 0.00],    # 1 spine
    [0.15, -0.05, 0.00],   # 2 left hip
    [-0.15, -0.05, 0.00],  # 3 right hip
    [0.00, 0.80, 0.00],    # 4 neck
    [0.00, 1.00, 0.05],    # 5 head
    [0.22, 0.75, 0.00],    # 6 left shoulder
    [0.45, 0.55, 0.00],    # 7 left elbow
    [0.55, 0.32, 0.05],    # 8 left wrist
    [-0.22, 0.75, 0.00],   # 9 right shoulder
    [-0.45, 0.55, 0.00],   # 10 right elbow
    [-0.55, 0.32, 0.05],   # 11 right wrist
    [0.16, -0.50, 0.02],   # 12 left knee
    [0.16, -0.92, 0.00],   # 13 left ankle
    [-0.16, -0.50, 0.02],  # 14 right knee
    [-0.16, -0.92, 0.00],  # 15 right ankle
])
_LANDMARKS = 4

_CLASS_STREAM, _SCENE_STREAM, _NOISE_STREAM, _VIEW_STREAM = 0, 1, 2, 3


class InvalidConfig(ValueError):
    pass


@dataclass
class GeneratorConfig:
    n_classes: int = 5
    scenes_per_class: int = 60
    n_views: int = 3
    n_joints: int = 16
    seq_len: int = 30
    view_azimuths_deg: list = field(default_factory=lambda: [-45.0, 0.0, 45.0])
    occlusion_noise_std: float = 0.4
    rng_seed: int = 0
    # fraction of joints each camera sees poorly
    occlusion_fraction: float = 0.35
    # camera translation magnitude; 0 makes views pure rotations of each other
    view_offset: float = 1.0
    # relative spread of a scene around its class template
    scene_jitter: float = 0.35
    motion_amplitude: float = 0.25
    # 0 gives every class the same motion template, 1 fully independent templates
    class_separation: float = 0.5
    # Gaussian smoothing width (frames) of the occlusion noise; 0 is white noise
    occlusion_smoothness: float = 6.0
    # noise multiplier for occluded torso landmarks (they anchor the alignment frame)
    landmark_occlusion_scale: float = 0.25

    def validate(self):
        if self.n_classes < 1 or self.scenes_per_class < 1:
            raise InvalidConfig("need at least one class and one scene per class")
        if self.n_views < 2:
            raise InvalidConfig("n_views must be >= 2")
        if len(self.view_azimuths_deg) != self.n_views:
            raise InvalidConfig(f"view_azimuths_deg has {len(self.view_azimuths_deg)} entries for {self.n_views} views")
        if self.n_joints < 4:
            raise InvalidConfig("n_joints must be >= 4")
        if self.seq_len < 2:
            raise InvalidConfig("seq_len must be >= 2")
        if self.occlusion_noise_std < 0:
            raise InvalidConfig("occlusion_noise_std must be >= 0")
        if not 0 <= self.occlusion_fraction <= 1:
            raise InvalidConfig("occlusion_fraction must lie in [0, 1]")
        if self.landmark_occlusion_scale < 0:
            raise InvalidConfig("landmark_occlusion_scale must be >= 0")
        if self.occlusion_smoothness < 0:
            raise InvalidConfig("occlusion_smoothness must be >= 0")
        if not 0 <= self.class_separation <= 1:
            raise InvalidConfig("class_separation must lie in [0, 1]")
        if self.scene_jitter < 0 or self.motion_amplitude < 0 or self.view_offset < 0:
            raise InvalidConfig("scene_jitter, motion_amplitude and view_offset must be >= 0")
        if not 0 <= self.rng_seed < 2**64:
            raise InvalidConfig("rng_seed must be a 64-bit unsigned integer")
        return self


def _rng(seed, *tags):
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, *tags])))


def rest_pose(n_joints):
    if n_joints <= len(_REST_POSE):
        return _REST_POSE[:n_joints].copy()
    # extra joints sit between consecutive table joints, walking the table cyclically
    extra = []
    k = 0
    while len(_REST_POSE) + len(extra) < n_joints:
        a, b = k % len(_REST_POSE), (k + 5) % len(_REST_POSE)
        extra.append(0.5 * (_REST_POSE[a] + _REST_POSE[b]) + [0.0, 0.0, 0.03 * (1 + k // len(_REST_POSE))])
        k += 1
    return np.vstack([_REST_POSE, np.array(extra)])


def _yaw(deg):
    a = np.deg2rad(deg)
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def _raw_template(cfg, rng):
    n = cfg.n_joints
    amp = rng.uniform(0.2, 1.0, size=(n, 3)) * cfg.motion_amplitude
    # the torso landmarks move only slightly so frame 0 stays a usable body frame
    amp[:_LANDMARKS] *= 0.1
    return {
        "amp": amp,
        "phase": rng.uniform(0.0, 2 * np.pi, size=(n, 3)),
        "freq": rng.uniform(0.5, 2.5),
        "harm_amp": rng.uniform(0.0, 0.5, size=(n, 3)) * cfg.motion_amplitude,
        "harm_phase": rng.uniform(0.0, 2 * np.pi, size=(n, 3)),
    }


def class_template(cfg, c):
    own = _raw_template(cfg, _rng(cfg.rng_seed, _CLASS_STREAM, c))
    if cfg.class_separation == 1.0:
        return own
    base = _raw_template(cfg, _rng(cfg.rng_seed, _CLASS_STREAM, cfg.n_classes))
    s = cfg.class_separation
    return {k: (1.0 - s) * base[k] + s * own[k] for k in own}


def scene_world_sequence(cfg, template, scene_id):
    """World-frame (T, N, 3) motion for one scene."""
    rng = _rng(cfg.rng_seed, _SCENE_STREAM, scene_id)
    j = cfg.scene_jitter
    n = cfg.n_joints
    amp = template["amp"] * np.clip(1.0 + j * rng.standard_normal((n, 3)), 0.0, None)
    phase = template["phase"] + j * np.pi * 0.5 * rng.standard_normal((n, 3))
    freq = template["freq"] * (1.0 + 0.2 * j * rng.standard_normal())
    harm = template["harm_amp"] * np.clip(1.0 + j * rng.standard_normal((n, 3)), 0.0, None)
    scale = 1.0 + 0.1 * j * rng.standard_normal()
    heading = rng.uniform(-180.0, 180.0)
    position = rng.uniform(-0.5, 0.5, size=3) * [1.0, 0.0, 1.0]

    t = np.linspace(0.0, 1.0, cfg.seq_len)[:, None, None]
    w = 2 * np.pi * freq * t
    motion = amp * np.sin(w + phase) + harm * np.sin(2 * w + template["harm_phase"])
    world = scale * (rest_pose(n)[None] + motion)
    return world @ _yaw(heading).T + position


def occluded_joints(cfg):
    """Per-view fixed joint subsets that receive occlusion noise."""
    k = int(round(cfg.occlusion_fraction * cfg.n_joints))
    out = []
    for u in range(cfg.n_views):
        rng = _rng(cfg.rng_seed, _VIEW_STREAM, u)
        out.append(np.sort(rng.choice(cfg.n_joints, size=k, replace=False)))
    return out


def view_offset(cfg, u):
    a = np.deg2rad(cfg.view_azimuths_deg[u])
    return cfg.view_offset * np.array([np.sin(a), 0.1 * u, np.cos(a)])


def occlusion_noise(cfg, rng, T, k):
    """(T, k, 3) zero-mean Gaussian noise with per-entry std ``occlusion_noise_std``.

    With ``occlusion_smoothness > 0`` white noise is convolved along time with a
    Gaussian kernel and rescaled to unit variance, so an occluded joint drifts
    instead of jittering.
    """
    width = cfg.occlusion_smoothness
    if width <= 0:
        return cfg.occlusion_noise_std * rng.standard_normal((T, k, 3))
    half = int(np.ceil(3 * width))
    taps = np.exp(-0.5 * (np.arange(-half, half + 1) / width) ** 2)
    taps /= np.sqrt((taps ** 2).sum())
    white = rng.standard_normal((T + 2 * half, k, 3))
    smooth = np.stack([taps @ white[t:t + 2 * half + 1].reshape(2 * half + 1, -1) for t in range(T)])
    return cfg.occlusion_noise_std * smooth.reshape(T, k, 3)


def render_view(cfg, world, scene_id, u, occluded):
    seq = world @ _yaw(cfg.view_azimuths_deg[u]).T + view_offset(cfg, u)
    if cfg.occlusion_noise_std > 0 and len(occluded[u]):
        rng = _rng(cfg.rng_seed, _NOISE_STREAM, scene_id, u)
        noise = occlusion_noise(cfg, rng, seq.shape[0], len(occluded[u]))
        noise[:, occluded[u] < _LANDMARKS] *= cfg.landmark_occlusion_scale
        seq[:, occluded[u]] += noise
    return seq


def generate_corpus(cfg):
    cfg.validate()
    templates = [class_template(cfg, c) for c in range(cfg.n_classes)]
    occluded = occluded_joints(cfg)
    seqs = []
    for c in range(cfg.n_classes):
        for k in range(cfg.scenes_per_class):
            sid = c * cfg.scenes_per_class + k
            world = scene_world_sequence(cfg, templates[c], sid)
            for u in range(cfg.n_views):
                seqs.append(ActionSequence(render_view(cfg, world, sid, u, occluded), sid, u, c))
    return MultiViewCorpus(seqs, cfg.n_views, SkeletonTopology(cfg.n_joints), meta={"generator": asdict(cfg)})


# ---------------------------------------------------------------- serialization

def sequence_record(seq):
    return {
        "scene_id": int(seq.scene_id),
        "view_id": int(seq.view_id),
        "class_label": None if seq.class_label is None else int(seq.class_label),
        "frames": seq.frames.tolist(),
    }


def write_corpus(corpus, path):
    # json writes floats with repr(), which round-trips doubles exactly
    with open(path, "w") as fh:
        for s in corpus.sequences:
            fh.write(json.dumps(sequence_record(s), separators=(",", ":")))
            fh.write("\n")
    return len(corpus)


def read_corpus(path, topology=None):
    seqs = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                seqs.append(ActionSequence(
                    np.array(rec["frames"], dtype=np.float64),
                    int(rec["scene_id"]), int(rec["view_id"]),
                    None if rec.get("class_label") is None else int(rec["class_label"]),
                ))
            except (KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: bad corpus record ({exc})") from exc
    if not seqs:
        raise ValueError(f"{path}: no records")
    if topology is None:
        topology = SkeletonTopology(seqs[0].n_joints)
    n_views = len({s.view_id for s in seqs})
    return MultiViewCorpus(seqs, n_views, topology)
