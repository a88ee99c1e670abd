"""Dataclass configs plus the flat ``key = value`` config-file format.

Every field is addressable by a dotted key (``backbone.dim``,
``rot.n_rotations``, ``loss.lambda``); top-level training fields are bare.
Unknown keys and type mismatches are hard errors so a run directory's
echoed config is always complete and re-runnable.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields

from .errors import ConfigError


@dataclass
class BackboneConfig:
    image_h: int = 64
    image_w: int = 64
    channels: int = 3
    patch: int = 8
    stride: int = 6
    dim: int = 64
    heads: int = 4
    depth: int = 3          # encoder layers before the branch split
    mlp_ratio: float = 4.0

    def validate(self):
        if self.stride > self.patch:
            raise ConfigError(
                f"stride {self.stride} must not exceed patch {self.patch} "
                "(overlapping embedding)")
        if self.image_h < self.patch or self.image_w < self.patch:
            raise ConfigError("image smaller than one patch")
        if self.stride < 1:
            raise ConfigError("stride must be >= 1")
        if self.dim % self.heads != 0:
            raise ConfigError(
                f"dim {self.dim} not divisible by heads {self.heads}")


@dataclass
class RotationConfig:
    n_rotations: int = 4
    alpha_degrees: float = 45.0
    fixed_angle_set: str = ""      # comma-separated degrees; empty = random
    resample_per_step: bool = True

    def validate(self):
        if self.n_rotations < 0:
            raise ConfigError("n_rotations must be >= 0")
        if self.alpha_degrees < 0:
            raise ConfigError("alpha_degrees must be >= 0")
        if self.fixed_angle_set:
            angles = self.fixed_angles()
            if len(angles) != self.n_rotations:
                raise ConfigError(
                    "fixed_angle_set length must equal n_rotations")

    def fixed_angles(self):
        if not self.fixed_angle_set:
            return None
        try:
            return [float(a) for a in self.fixed_angle_set.split(",")]
        except ValueError as e:
            raise ConfigError(f"bad fixed_angle_set: {e}") from e


@dataclass
class LossConfig:
    lambda_: float = field(default=0.5, metadata={"key": "lambda"})
    label_smoothing: float = 0.0
    triplet_mode: str = "softplus"     # softplus | hinge0
    # scale of the smooth-L1 constraint term; desk-scale features sit deep
    # in the quadratic region, so a weight ~100 restores the gradient
    # magnitude the term has when feature differences reach the linear
    # regime.  0 disables the constraint entirely.
    invariance_weight: float = 100.0

    def validate(self):
        if not 0.0 <= self.lambda_ <= 1.0:
            raise ConfigError(
                f"lambda must lie in [0,1], got {self.lambda_}")
        if self.triplet_mode not in ("softplus", "hinge0"):
            raise ConfigError(f"unknown triplet_mode {self.triplet_mode!r}")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigError("label_smoothing must lie in [0,1)")
        if self.invariance_weight < 0:
            raise ConfigError("invariance_weight must be >= 0")


@dataclass
class SynthConfig:
    num_train_ids: int = 32
    num_test_ids: int = 16
    images_per_id: int = 12
    image_size: int = 64
    train_rotation_max: float = 0.0
    test_rotation_max: float = 45.0
    background_noise_std: float = 0.02
    occlusion_prob: float = 0.1
    scale_jitter: float = 0.05
    queries_per_id: int = 4
    seed: int = 0

    def validate(self):
        if self.num_train_ids < 4 or self.num_test_ids < 2:
            raise ConfigError("need >= 4 train ids and >= 2 test ids")
        if self.images_per_id < 4:
            raise ConfigError("images_per_id must be >= 4")
        if not 0 < self.queries_per_id < self.images_per_id:
            raise ConfigError("queries_per_id must leave gallery images")


@dataclass
class TrainConfig:
    epochs: int = 36
    base_lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    warmup_frac: float = 0.05
    p_ids: int = 8
    k_images: int = 4
    seed: int = 0
    precision: str = "float32"
    eval_every: int = 0                # epochs between evals; 0 = final only
    aug_rotation_max: float = 0.0      # image-level rotation augment, degrees
    aug_rotation_mode: str = "pad"     # pad | crop
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    rot: RotationConfig = field(default_factory=RotationConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    data: SynthConfig = field(default_factory=SynthConfig)

    def validate(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.base_lr <= 0:
            raise ConfigError("base_lr must be > 0")
        if self.precision not in ("float32", "float64"):
            raise ConfigError(f"unknown precision {self.precision!r}")
        if self.p_ids < 2 or self.k_images < 2:
            raise ConfigError("batch-hard mining needs p_ids,k_images >= 2")
        if self.aug_rotation_mode not in ("pad", "crop"):
            raise ConfigError("aug_rotation_mode must be pad or crop")
        for sub in (self.backbone, self.rot, self.loss, self.data):
            sub.validate()


_SECTIONS = {"backbone": BackboneConfig, "rot": RotationConfig,
             "loss": LossConfig, "data": SynthConfig}

# bare aliases matching the per-module key names
_ALIASES = {
    "lambda": "loss.lambda",
    "label_smoothing": "loss.label_smoothing",
    "triplet_mode": "loss.triplet_mode",
    "n_rotations": "rot.n_rotations",
    "alpha_degrees": "rot.alpha_degrees",
    "fixed_angle_set": "rot.fixed_angle_set",
    "resample_per_step": "rot.resample_per_step",
}


def _field_key(f) -> str:
    return f.metadata.get("key", f.name)


def _schema():
    """Dotted key -> (owner attr path, dataclass field)."""
    out = {}
    for f in fields(TrainConfig):
        if f.name in _SECTIONS:
            for sf in fields(_SECTIONS[f.name]):
                out[f"{f.name}.{_field_key(sf)}"] = ((f.name,), sf)
        else:
            out[_field_key(f)] = ((), f)
    return out


_SCHEMA = _schema()


def _parse_value(raw: str, f, key: str, where: str):
    raw = raw.strip()
    t = f.type if not isinstance(f.type, str) else {"int": int, "float": float,
                                                    "bool": bool, "str": str}[f.type]
    try:
        if t is bool:
            low = raw.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(f"expected a boolean, got {raw!r}")
        if t is int:
            return int(raw)
        if t is float:
            return float(raw)
        return raw
    except ValueError as e:
        raise ConfigError(f"{where}: key {key!r}: {e}") from e


def apply_setting(cfg: TrainConfig, key: str, raw: str, where: str = "override"):
    key = _ALIASES.get(key, key)
    if key not in _SCHEMA:
        raise ConfigError(f"{where}: unknown config key {key!r}")
    path, f = _SCHEMA[key]
    value = _parse_value(raw, f, key, where)
    target = cfg
    for attr in path:
        target = getattr(target, attr)
    setattr(target, f.name, value)


def load_config(path=None, overrides=()) -> TrainConfig:
    """Build a TrainConfig from a flat key = value file plus overrides."""
    cfg = TrainConfig()
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                lines = fh.readlines()
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        for ln, line in enumerate(lines, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{ln}: expected 'key = value'")
            key, raw = line.split("=", 1)
            apply_setting(cfg, key.strip(), raw, where=f"{path}:{ln}")
    for ov in overrides:
        if "=" not in ov:
            raise ConfigError(f"override {ov!r} is not key=value")
        key, raw = ov.split("=", 1)
        apply_setting(cfg, key.strip(), raw)
    cfg.validate()
    return cfg


def config_to_text(cfg: TrainConfig) -> str:
    """Flat, fully-resolved echo of a config (round-trips via load)."""
    lines = []
    for key in sorted(_SCHEMA):
        path, f = _SCHEMA[key]
        target = cfg
        for attr in path:
            target = getattr(target, attr)
        v = getattr(target, f.name)
        if isinstance(v, bool):
            v = "true" if v else "false"
        lines.append(f"{key} = {v}")
    return "\n".join(lines) + "\n"


def config_from_text(text: str) -> TrainConfig:
    cfg = TrainConfig()
    for ln, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, raw = line.split("=", 1)
        apply_setting(cfg, key.strip(), raw, where=f"line {ln}")
    cfg.validate()
    return cfg


def clone_config(cfg: TrainConfig) -> TrainConfig:
    return dataclasses.replace(
        cfg,
        backbone=dataclasses.replace(cfg.backbone),
        rot=dataclasses.replace(cfg.rot),
        loss=dataclasses.replace(cfg.loss),
        data=dataclasses.replace(cfg.data),
    )
