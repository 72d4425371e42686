"""Run configuration: a flat ``key = value`` text file with named ablation presets."""
from __future__ import annotations

import os
from dataclasses import dataclass, fields, replace
from pathlib import Path

from .data import DEFAULT_NOISE_DEG
from .errors import ConfigError
from .losses import LossWeights
from .pipeline import PipelineConfig
from .pretrain import EncoderConfig

SEED_ENV = "GESTPOSE_SEED"


@dataclass
class RunConfig:
    seed: int = 0
    data_dir: str = "data"
    out_dir: str = "runs"
    stage1_checkpoint: str = ""
    # data
    n_coarse: int = 6
    n_fine: int = 10
    n_per_fine: int = 50
    split_ratios: tuple = (0.7, 0.15, 0.15)
    noise_deg: float = DEFAULT_NOISE_DEG
    occlusion_aug: bool = False
    max_drop: int = 5
    # encoder
    grid_size: int = 16
    c4: int = 32
    c5: int = 64
    blocks_per_scale: int = 2
    # stage-2 network
    d_model: int = 128
    depth_bins: int = 8
    n_layers: int = 2
    n_heads: int = 4
    softargmax_scale: float = 1.0
    gate_init: float = -4.0
    # loss weights
    w_pose: float = 2.0
    w_shape: float = 0.5
    w_joints3d: float = 20.0
    w_mano3d: float = 20.0
    w_xyz25d: float = 0.05
    w_joints2d: float = 0.5
    w_mano2d: float = 0.5
    w_cont: float = 10.0
    # optimization
    lr: float = 1e-3
    lr_decay: bool = True  # cosine decay in stage 2
    batch_size: int = 32
    pretrain_epochs: int = 50
    train_epochs: int = 200
    # ablation switches
    no_pretrain: bool = False
    no_guidance: bool = False
    freeze_encoder: bool = False

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.pretrain_epochs < 0 or self.train_epochs < 0:
            raise ConfigError("epoch counts must be >= 0")
        if len(self.split_ratios) != 3:
            raise ConfigError("split_ratios needs three values")

    # -- derived configs

    def encoder_config(self):
        return EncoderConfig(grid_size=self.grid_size, c4=self.c4, c5=self.c5,
                             blocks_per_scale=self.blocks_per_scale)

    def pipeline_config(self):
        try:
            return PipelineConfig(d_model=self.d_model, depth_bins=self.depth_bins,
                                  n_layers=self.n_layers, n_heads=self.n_heads,
                                  softargmax_scale=self.softargmax_scale, gate_init=self.gate_init)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def loss_weights(self):
        return LossWeights(**{f.name: getattr(self, "w_" + f.name) for f in fields(LossWeights)})

    # -- text form

    def to_dict(self):
        return {f.name: _format(getattr(self, f.name)) for f in fields(self)}

    def to_text(self):
        return "".join(f"{k} = {v}\n" for k, v in self.to_dict().items())

    @classmethod
    def from_dict(cls, values, base=None):
        base = base or cls()
        types = {f.name: type(getattr(base, f.name)) for f in fields(cls)}
        parsed = {}
        for key, raw in values.items():
            if key not in types:
                raise ConfigError(f"unknown config key {key!r}")
            parsed[key] = _parse(key, str(raw), types[key])
        return replace(base, **parsed)

    @classmethod
    def from_text(cls, text, base=None):
        values = {}
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
            values[key.strip()] = value.strip()
        return cls.from_dict(values, base)

    @classmethod
    def load(cls, path, base=None):
        return cls.from_text(Path(path).read_text(), base)


def _format(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return ", ".join(_format(float(x)) for x in v)
    return str(v)


def _parse(key, raw, kind):
    try:
        if kind is bool:
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if kind is tuple:
            return tuple(float(x) for x in raw.split(","))
        return kind(raw)
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot parse {raw!r} as {kind.__name__}") from None


PRESETS = {
    "full": {},
    "no-pt": {"no_pretrain": True},
    "no-guidance": {"no_guidance": True},
    "no-pt-no-guidance": {"no_pretrain": True, "no_guidance": True},
    "full-scale": {"d_model": 1024, "depth_bins": 16, "grid_size": 64, "c4": 256, "c5": 512},
}


def apply_preset(cfg, name):
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    return replace(cfg, **PRESETS[name])


def seed_from_env(cfg, environ=None):
    """Override ``cfg.seed`` with ``$GESTPOSE_SEED`` when set."""
    environ = os.environ if environ is None else environ
    raw = environ.get(SEED_ENV)
    if raw is None or raw == "":
        return cfg
    try:
        return replace(cfg, seed=int(raw))
    except ValueError:
        raise ConfigError(f"{SEED_ENV} must be an integer, got {raw!r}") from None
