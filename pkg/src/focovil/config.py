"""Run configuration: one YAML document, parsed strictly.

Top-level keys::

    seed        required integer; drives corpus, initialisation and batching
    data        GeneratorConfig fields (rng_seed comes from ``seed``)
    preprocess  target_len
    model       hidden, layers, proj_mid, dec_hidden, dtype
    train       batch_anchors, epochs, lr, lr_decay, beta1, beta2, eps, clip_norm, ablation
    loss        tau, alpha, beta, stop_grad_weights
    eval        held_out_view, cluster_seed, probe {lr, epochs, seed}
    ablate      variants, seeds

Every section is optional; unknown keys anywhere are an error.  Whether the
contrastive term is focalized follows from ``train.ablation``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import yaml

from .evaluation import ProbeConfig
from .losses import LossConfig
from .model import ModelConfig
from .synth import GeneratorConfig, InvalidConfig
from .training import ABLATIONS, AblationSettings, TrainConfig


class ConfigError(ValueError):
    pass


_INT = (int,)
_REAL = (int, float)
_BOOL = (bool,)


def _opt(types):
    return types + (type(None),)


_SCHEMA = {
    "data": {
        "n_classes": _INT, "scenes_per_class": _INT, "n_views": _INT, "n_joints": _INT,
        "seq_len": _INT, "view_azimuths_deg": (list,), "occlusion_noise_std": _REAL,
        "occlusion_fraction": _REAL, "view_offset": _REAL, "scene_jitter": _REAL,
        "motion_amplitude": _REAL, "class_separation": _REAL, "occlusion_smoothness": _REAL,
        "landmark_occlusion_scale": _REAL,
    },
    "preprocess": {"target_len": _INT},
    "model": {"hidden": _INT, "layers": _INT, "proj_mid": _opt(_INT), "dec_hidden": _opt(_INT), "dtype": (str,)},
    "train": {
        "batch_anchors": _INT, "epochs": _INT, "lr": _REAL, "lr_decay": _REAL, "beta1": _REAL,
        "beta2": _REAL, "eps": _REAL, "clip_norm": _REAL, "ablation": (str,),
    },
    "loss": {"tau": _REAL, "alpha": _REAL, "beta": _REAL, "stop_grad_weights": _BOOL},
    "eval": {"held_out_view": _INT, "cluster_seed": _INT, "probe": (dict,)},
    "probe": {"lr": _REAL, "epochs": _INT, "seed": _INT},
    "ablate": {"variants": (list,), "seeds": (list,)},
}
_REQUIRED = ("seed",)
_TOP = ("seed",) + tuple(k for k in _SCHEMA if k != "probe")


@dataclass
class EvalSettings:
    held_out_view: int = 2
    cluster_seed: int = 0
    probe: ProbeConfig = field(default_factory=ProbeConfig)


@dataclass
class RunConfig:
    seed: int
    data: GeneratorConfig
    target_len: int
    model: ModelConfig
    train: TrainConfig
    eval: EvalSettings
    ablate: AblationSettings

    def model_config(self, input_dim):
        return ModelConfig(**{**asdict(self.model), "input_dim": input_dim})

    def to_dict(self):
        """The fully resolved document; parsing it again gives an equal RunConfig."""
        data = asdict(self.data)
        data.pop("rng_seed")
        model = asdict(self.model)
        for k in ("input_dim", "seed"):
            model.pop(k)
        train = asdict(self.train)
        loss = train.pop("loss")
        loss.pop("focalize")
        train.pop("seed")
        return {
            "seed": self.seed,
            "data": data,
            "preprocess": {"target_len": self.target_len},
            "model": model,
            "train": train,
            "loss": loss,
            "eval": {"held_out_view": self.eval.held_out_view, "cluster_seed": self.eval.cluster_seed,
                     "probe": asdict(self.eval.probe)},
            "ablate": {"variants": list(self.ablate.variants), "seeds": list(self.ablate.seeds)},
        }


def _is(value, types):
    # bool is an int subclass; only accept it where a bool is asked for
    if isinstance(value, bool) and bool not in types:
        return False
    return isinstance(value, types)


def _section(doc, name, where=None):
    where = where or name
    raw = doc.get(name)
    if raw is None:
        return {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected a mapping")
    schema = _SCHEMA[name]
    for key, value in raw.items():
        if key not in schema:
            raise ConfigError(f"unknown key {where}.{key}")
        if not _is(value, schema[key]):
            raise ConfigError(f"{where}.{key}: bad value {value!r}")
    return dict(raw)


def parse_config(doc):
    if not isinstance(doc, dict):
        raise ConfigError("config must be a mapping")
    for key in doc:
        if key not in _TOP:
            raise ConfigError(f"unknown key {key}")
    for key in _REQUIRED:
        if key not in doc:
            raise ConfigError(f"missing required key {key}")
    seed = doc["seed"]
    if not _is(seed, _INT) or not 0 <= seed < 2**64:
        raise ConfigError(f"seed: bad value {seed!r}")

    data = _section(doc, "data")
    if "view_azimuths_deg" in data and not all(_is(a, _REAL) for a in data["view_azimuths_deg"]):
        raise ConfigError("data.view_azimuths_deg: angles must be numbers")
    prep = _section(doc, "preprocess")
    model = _section(doc, "model")
    train = _section(doc, "train")
    loss = _section(doc, "loss")
    ev = _section(doc, "eval")
    probe = _section(ev, "probe", "eval.probe")
    ab = _section(doc, "ablate")

    try:
        gen = GeneratorConfig(**{**data, "rng_seed": seed}).validate()
        target_len = prep.get("target_len", 30)
        if target_len < 2:
            raise ConfigError("preprocess.target_len must be >= 2")
        mcfg = ModelConfig(input_dim=gen.n_joints * 3, seed=seed, **model)
        if mcfg.hidden < 1 or mcfg.layers < 1:
            raise ConfigError("model.hidden and model.layers must be >= 1")
        tcfg = TrainConfig(**{**train, "seed": seed, "loss": LossConfig(**loss)}).validate()
        if not 0 <= ev.get("held_out_view", 2) < gen.n_views:
            raise ConfigError(f"eval.held_out_view must lie in [0, {gen.n_views})")
        evs = EvalSettings(ev.get("held_out_view", 2), ev.get("cluster_seed", 0), ProbeConfig(**probe))
        variants = tuple(ab.get("variants", ABLATIONS))
        bad = [v for v in variants if v not in ABLATIONS]
        if bad:
            raise ConfigError(f"ablate.variants: unknown variant {bad[0]!r}")
        seeds = tuple(ab.get("seeds", (0, 1, 2)))
        if not seeds or not all(_is(s, _INT) for s in seeds):
            raise ConfigError("ablate.seeds must be a non-empty list of integers")
    except (InvalidConfig, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc
    settings = AblationSettings(variants, seeds, evs.held_out_view, target_len, evs.cluster_seed)
    return RunConfig(seed, gen, target_len, mcfg, tcfg, evs, settings)


def load_config(path):
    """Parse a YAML file; OSError propagates, content problems raise ConfigError."""
    with open(path) as fh:
        text = fh.read()
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML ({exc})") from exc
    return parse_config(doc)


def dump_config(run, path):
    with open(path, "w") as fh:
        yaml.safe_dump(run.to_dict(), fh, sort_keys=False)


def field_names(cls):
    return [f.name for f in fields(cls)]
