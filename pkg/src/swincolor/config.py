"""Training configuration: defaults, profiles, the key=value file format."""

from __future__ import annotations

import dataclasses

from . import model
from .losses import LossWeights


class ConfigError(ValueError):
    """Bad configuration value or unknown key; maps to usage exit code 2."""


# Full-scale settings; no sensible default exists for steps at this scale,
# so the profile forces an explicit choice.
PROFILES = {
    "desk": {},
    "paper": {
        "batch_size": 16,
        "image_size": 256,
        "base_width": 64,
        "window": 8,
        "steps": -1,
    },
}

ABLATIONS = model.ABLATIONS
LIPSCHITZ_MODES = ("clip", "gp")


@dataclasses.dataclass
class TrainConfig:
    """Desk-scale defaults; the "paper" profile restores full-scale values."""

    lr_g: float = 1e-4
    lr_d: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    batch_size: int = 4
    image_size: int = 64
    steps: int = 1000
    seed: int = 0
    lambda_adversarial: float = 0.1
    lambda_perceptual: float = 100.0
    lambda_pixel: float = 10.0
    lambda_color: float = 1.0
    ablation: str = "full"
    clip_c: float = 0.01
    n_critic: int = 1
    noise_std: float = 0.1
    lipschitz: str = "clip"
    gp_weight: float = 10.0
    base_width: int = 32
    window: int = 0  # 0 = largest divisor of the bottleneck grid, at most 8
    heads: int = 8
    mlp_ratio: int = 4
    perceptual_tap: int = 3
    backbone_seed: int = 1234
    eval_seed: int = 1000
    checkpoint_every: int = 0  # 0 = final checkpoint only
    single_thread: bool = True
    train_frac: float = 0.8

    def loss_weights(self) -> LossWeights:
        return LossWeights(
            adversarial=self.lambda_adversarial,
            perceptual=self.lambda_perceptual,
            pixel=self.lambda_pixel,
            color=self.lambda_color,
        )

    def bottleneck_grid(self) -> int:
        return self.image_size // 16

    def validate(self) -> "TrainConfig":
        for name in ("lr_g", "lr_d", "clip_c", "noise_std", "gp_weight"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be > 0, got {getattr(self, name)}")
        for name in ("beta1", "beta2"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ConfigError(f"{name} must lie in [0, 1), got {getattr(self, name)}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.image_size < 16 or self.image_size % 16:
            raise ConfigError(
                f"image_size must be a positive multiple of 16, got {self.image_size}"
            )
        if self.steps < 0:
            raise ConfigError(
                "steps must be set explicitly (the paper profile does not preset it)"
                if self.steps == -1
                else f"steps must be >= 0, got {self.steps}"
            )
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"ablation must be one of {ABLATIONS}, got {self.ablation!r}")
        if self.lipschitz not in LIPSCHITZ_MODES:
            raise ConfigError(
                f"lipschitz must be one of {LIPSCHITZ_MODES}, got {self.lipschitz!r}"
            )
        if self.n_critic < 1:
            raise ConfigError(f"n_critic must be >= 1, got {self.n_critic}")
        for name in ("lambda_adversarial", "lambda_perceptual", "lambda_pixel", "lambda_color"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.base_width < 1:
            raise ConfigError(f"base_width must be >= 1, got {self.base_width}")
        if self.heads < 1 or (8 * self.base_width) % self.heads:
            raise ConfigError(
                f"heads must divide the bottleneck width {8 * self.base_width}, got {self.heads}"
            )
        if self.window < 0 or (self.window and self.bottleneck_grid() % self.window):
            raise ConfigError(
                f"window {self.window} must be 0 (auto) or divide the bottleneck "
                f"grid {self.bottleneck_grid()}"
            )
        if self.mlp_ratio < 1:
            raise ConfigError(f"mlp_ratio must be >= 1, got {self.mlp_ratio}")
        if not 1 <= self.perceptual_tap <= 4:
            raise ConfigError(f"perceptual_tap must be 1..4, got {self.perceptual_tap}")
        if not 0.0 < self.train_frac < 1.0:
            raise ConfigError(f"train_frac must lie in (0, 1), got {self.train_frac}")
        if self.checkpoint_every < 0:
            raise ConfigError(f"checkpoint_every must be >= 0, got {self.checkpoint_every}")
        return self

    def to_mapping(self) -> dict:
        return dataclasses.asdict(self)


def field_types() -> dict:
    return {f.name: f.type for f in dataclasses.fields(TrainConfig)}


def _coerce(name, kind, raw):
    if isinstance(raw, str):
        text = raw.strip()
        if kind in ("bool", bool):
            lowered = text.lower()
            if lowered in ("true", "yes", "1", "on"):
                return True
            if lowered in ("false", "no", "0", "off"):
                return False
            raise ConfigError(f"{name} expects a boolean, got {raw!r}")
        try:
            if kind in ("int", int):
                return int(text)
            if kind in ("float", float):
                return float(text)
        except ValueError:
            raise ConfigError(f"{name} expects a {kind} value, got {raw!r}") from None
        return text
    return raw


def parse_config_file(path) -> dict:
    """Read a key = value file (one pair per line, # comments) into raw strings."""
    raw = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise ConfigError(f"{path}:{lineno}: expected key = value, got {stripped!r}")
            key, _, value = stripped.partition("=")
            raw[key.strip()] = value.strip()
    return raw


def build_config(*mappings) -> TrainConfig:
    """Fold raw mappings over the defaults, later mappings winning.

    Each mapping may carry a ``profile`` key (applied before its other keys);
    unknown keys are errors.  The result is validated.
    """
    kinds = field_types()
    values = dataclasses.asdict(TrainConfig())
    for mapping in mappings:
        if mapping is None:
            continue
        pending = dict(mapping)
        profile = pending.pop("profile", None)
        if profile is not None:
            if profile not in PROFILES:
                raise ConfigError(
                    f"unknown profile {profile!r}; expected one of {tuple(PROFILES)}"
                )
            values.update(PROFILES[profile])
        for key, raw in pending.items():
            if key not in kinds:
                raise ConfigError(f"unknown config key {key!r}")
            values[key] = _coerce(key, kinds[key], raw)
    return TrainConfig(**values).validate()
