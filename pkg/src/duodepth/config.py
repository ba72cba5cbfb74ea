"""Configuration dataclasses, presets, and TOML/CLI loading."""

from __future__ import annotations

import dataclasses
import sys
from dataclasses import dataclass, field

from .errors import ConfigError

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

SCENE_KINDS = ("random_dot", "slanted_planes", "layered_boxes")


@dataclass
class SceneConfig:
    height: int = 128
    width: int = 256
    max_disparity: float = 64.0
    scene_kind: str = "slanted_planes"
    textureless_fraction: float = 0.0
    specular_fraction: float = 0.0
    noise_sigma: float = 0.0
    seed: int = 0
    # generator knobs beyond the minimum contract
    fixed_disparity: float | None = None  # random_dot: pin the integer shift
    layer_disparities: tuple | None = None  # layered_boxes: pin layer values
    n_layers: int = 3
    min_disparity: float = 2.0

    def validate(self) -> "SceneConfig":
        if self.height <= 0 or self.width <= 0:
            raise ConfigError(f"non-positive scene size {self.height}x{self.width}")
        if not self.max_disparity < self.width:
            raise ConfigError(f"max_disparity {self.max_disparity} must be < width {self.width}")
        for name in ("textureless_fraction", "specular_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name}={v} outside [0, 1]")
        if self.scene_kind not in SCENE_KINDS:
            raise ConfigError(f"scene_kind {self.scene_kind!r} not in {SCENE_KINDS}")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")
        return self


@dataclass
class ModelConfig:
    channels: int = 32  # C
    candidates: int = 16  # D, in stride-8 units
    hypotheses: int = 2  # K kept per pixel at the coarse stage
    corr_groups: int = 8  # G
    heads: int = 4
    window: int = 8  # N (coarse); the fine monocular window is N/2
    coarse_iters: int = 4  # l
    fine_iters: int = 2  # l'
    prop_window: int = 4
    decoder_hidden: int = 64
    max_disparity: float = 128.0
    monocular_readout: bool = True
    monocular_update: bool = True
    context_backbone: str = "toy"

    def validate(self) -> "ModelConfig":
        if self.channels % self.corr_groups:
            raise ConfigError(f"channels {self.channels} not divisible by corr_groups {self.corr_groups}")
        if self.channels % self.heads:
            raise ConfigError(f"channels {self.channels} not divisible by heads {self.heads}")
        if self.window % 2:
            raise ConfigError("window must be even (fine stage halves it)")
        if self.hypotheses < 1 or self.hypotheses > self.candidates:
            raise ConfigError(f"need 1 <= K={self.hypotheses} <= D={self.candidates}")
        if self.coarse_iters < 1 or self.fine_iters < 0:
            raise ConfigError("need coarse_iters >= 1 and fine_iters >= 0")
        return self


@dataclass
class TrainConfig:
    steps: int = 5000
    batch: int = 4
    peak_lr: float = 4e-4
    crop_h: int = 128
    crop_w: int = 256
    seed: int = 0
    gamma: float = 0.8
    lam_mono: float = 1.0
    lam_prop: float = 1.0
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    warmup_frac: float = 0.05
    checkpoint_every: int = 1000
    eval_every: int = 500
    eval_samples: int = 8
    deterministic: bool = True
    aug_stretch_prob: float = 0.3
    aug_jitter_prob: float = 0.5
    model: ModelConfig = field(default_factory=ModelConfig)
    # dataset: manifest path (str) or in-memory generator spec (dict with
    # SceneConfig keys plus "count")
    dataset: object = field(default_factory=lambda: {"count": 500})

    def validate(self) -> "TrainConfig":
        if min(self.steps, self.batch) <= 0:
            raise ConfigError("steps and batch must be positive")
        if self.crop_h % 8 or self.crop_w % 8:
            raise ConfigError(f"crop {self.crop_h}x{self.crop_w} must be divisible by 8")
        if self.peak_lr <= 0:
            raise ConfigError("peak_lr must be positive")
        self.model.validate()
        return self


def desk_preset() -> TrainConfig:
    """Default desk-scale training configuration."""
    return TrainConfig()


def overfit_preset() -> TrainConfig:
    """Single-sample overfit run: 500 steps, shallow iteration schedule."""
    cfg = TrainConfig(
        steps=500,
        batch=1,
        peak_lr=1e-3,
        checkpoint_every=500,
        eval_every=100,
        lam_mono=0.3,
        aug_stretch_prob=0.0,
        aug_jitter_prob=0.0,
        model=ModelConfig(coarse_iters=2, fine_iters=1),
        dataset={"count": 1},
    )
    return cfg


def paper_scale_preset() -> TrainConfig:
    """Hyperparameters reported for full-scale training. Named for reference;
    far beyond desk hardware and not an acceptance target."""
    return TrainConfig(
        steps=300_000,
        batch=8,
        peak_lr=5e-4,
        crop_h=384,
        crop_w=768,
        model=ModelConfig(candidates=40, max_disparity=320.0),
    )


PRESETS = {
    "desk": desk_preset,
    "overfit": overfit_preset,
    "paper_scale": paper_scale_preset,
}


def _coerce(value: str, typ):
    if typ is bool:
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"cannot parse boolean from {value!r}")
    if typ is int:
        return int(value)
    if typ is float:
        return float(value)
    return value


def _apply_dict(cfg, data: dict, prefix=""):
    for key, val in data.items():
        if key == "model" and isinstance(val, dict):
            _apply_dict(cfg.model, val, "model.")
            continue
        if not hasattr(cfg, key):
            raise ConfigError(f"unknown config key: {prefix}{key}")
        cur = getattr(cfg, key)
        if dataclasses.is_dataclass(cur) or key == "dataset":
            setattr(cfg, key, val)
        else:
            setattr(cfg, key, type(cur)(val) if cur is not None and not isinstance(val, type(cur)) else val)


def load_train_config(path: str | None = None, preset: str = "desk", overrides: dict | None = None) -> TrainConfig:
    """Build a TrainConfig from a preset, an optional TOML file, and
    dotted-key string overrides (CLI flags)."""
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; have {sorted(PRESETS)}")
    cfg = PRESETS[preset]()
    if path is not None:
        with open(path, "rb") as fh:
            _apply_dict(cfg, tomllib.load(fh))
    for dotted, raw in (overrides or {}).items():
        target = cfg
        parts = dotted.split(".")
        for p in parts[:-1]:
            if not hasattr(target, p):
                raise ConfigError(f"unknown config key: {dotted}")
            target = getattr(target, p)
        leaf = parts[-1]
        if isinstance(target, dict):
            target[leaf] = raw
            continue
        if not hasattr(target, leaf):
            raise ConfigError(f"unknown config key: {dotted}")
        cur = getattr(target, leaf)
        if leaf == "dataset":
            setattr(target, leaf, raw)
        else:
            setattr(target, leaf, _coerce(str(raw), type(cur)) if cur is not None else raw)
    return cfg.validate()


def config_to_dict(cfg) -> dict:
    return dataclasses.asdict(cfg)


def train_config_from_dict(data: dict) -> TrainConfig:
    model = ModelConfig(**data.pop("model", {}))
    return TrainConfig(model=model, **data)


def scene_config_from_dict(data: dict) -> SceneConfig:
    data = dict(data)
    if isinstance(data.get("layer_disparities"), list):
        data["layer_disparities"] = tuple(data["layer_disparities"])
    return SceneConfig(**data).validate()
