"""Configuration dataclasses and flat key-value config IO.

Run configs serialize to a flat mapping whose keys mirror field names, with
nested blocks flattened as dotted keys (``backbone.vision_dim``). That is the
on-disk format written beside every run output and accepted by ``--config`` /
``--set`` on the command line.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import yaml

from .errors import ConfigError, ParameterError
from .validation import check_in_range, check_non_negative, check_positive

CHECKPOINT_SCHEMA_VERSION = 1
MANIFEST_SCHEMA_VERSION = 1


@dataclass
class BackboneConfig:
    """Shape and seed of the frozen dual encoder.

    ``patch_or_token_count`` is the sequence capacity of both towers: the
    number of image patches (a perfect square) and the maximum text length in
    tokens. The same config and seed always rebuild byte-identical weights.
    """

    text_dim: int = 512
    vision_dim: int = 768
    joint_dim: int = 512
    vision_layers: int = 12
    text_layers: int = 12
    patch_or_token_count: int = 196
    seed: int = 0
    image_size: int = 224
    channels: int = 3
    vocab_size: int = 8192
    n_heads: int = 4

    def __post_init__(self):
        for name in ("text_dim", "vision_dim", "joint_dim", "vision_layers",
                     "text_layers", "patch_or_token_count", "image_size",
                     "channels", "vocab_size", "n_heads"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                raise ParameterError(f"backbone.{name} must be a positive integer, got {v!r}")
        if self.joint_dim > min(self.text_dim, self.vision_dim):
            raise ParameterError(
                f"backbone.joint_dim ({self.joint_dim}) must be <= "
                f"min(text_dim, vision_dim) = {min(self.text_dim, self.vision_dim)}"
            )
        grid = math.isqrt(self.patch_or_token_count)
        if grid * grid != self.patch_or_token_count:
            raise ParameterError(
                f"backbone.patch_or_token_count must be a perfect square, "
                f"got {self.patch_or_token_count}"
            )
        if self.image_size % grid != 0:
            raise ParameterError(
                f"backbone.image_size ({self.image_size}) must be divisible by the "
                f"patch grid ({grid})"
            )
        if self.text_dim % self.n_heads or self.vision_dim % self.n_heads:
            raise ParameterError(
                f"backbone.n_heads ({self.n_heads}) must divide text_dim and vision_dim"
            )

    @property
    def patch_grid(self) -> int:
        return math.isqrt(self.patch_or_token_count)

    @property
    def patch_size(self) -> int:
        return self.image_size // self.patch_grid

    @classmethod
    def tiny(cls, seed: int = 0, width: int = 32) -> "BackboneConfig":
        """A desk-scale backbone used by tests and the synthetic benchmark."""
        return cls(
            text_dim=width,
            vision_dim=width,
            joint_dim=width // 2,
            vision_layers=3,
            text_layers=3,
            patch_or_token_count=64,
            seed=seed,
            image_size=32,
            channels=3,
            vocab_size=512,
            n_heads=4,
        )


@dataclass
class LossWeights:
    """Temperature and mixing weights of the three-part objective."""

    tau: float = 0.07
    alpha_sp: float = 0.5
    beta: float = 0.5
    spurious_text_side: bool = False

    def __post_init__(self):
        check_positive(self.tau, "weights.tau")
        check_non_negative(self.alpha_sp, "weights.alpha_sp")
        check_non_negative(self.beta, "weights.beta")


@dataclass
class HsicConfig:
    """Kernel settings for the class-conditional dependence penalty.

    ``bandwidth`` is either the string ``"median_heuristic"`` or a fixed
    positive float (sigma^2 of the RBF kernel). The heuristic value is the
    median of pairwise squared distances within each class group, floored at
    ``bandwidth_floor``, and never receives gradient.
    """

    kernel: str = "rbf"
    bandwidth: object = "median_heuristic"
    min_class_count: int = 2
    bandwidth_floor: float = 1e-6

    def __post_init__(self):
        if self.kernel != "rbf":
            raise ParameterError(f"hsic.kernel must be 'rbf', got {self.kernel!r}")
        if isinstance(self.bandwidth, str):
            if self.bandwidth != "median_heuristic":
                raise ParameterError(
                    f"hsic.bandwidth must be 'median_heuristic' or a positive float, "
                    f"got {self.bandwidth!r}"
                )
        else:
            self.bandwidth = float(self.bandwidth)
            check_positive(self.bandwidth, "hsic.bandwidth")
        if not isinstance(self.min_class_count, int) or self.min_class_count < 2:
            raise ParameterError(
                f"hsic.min_class_count must be an integer >= 2, got {self.min_class_count!r}"
            )
        check_positive(self.bandwidth_floor, "hsic.bandwidth_floor")


@dataclass
class TrainConfig:
    """Everything a training run needs; fully determines the run given a manifest."""

    shots: int = 16
    epochs: int = 10
    batch_size: int = 4
    learning_rate: float = 2.6e-6
    momentum: float = 0.0
    lora_rank: int = 4
    lora_scale: float = 1.0
    prompt_depth: int = 3
    prompt_width: int = 2
    seed: int = 0
    device: str = "cpu"
    out_dir: Optional[Path] = None
    loss_mode: str = "full"          # "full" | "ce_only"
    cosine_lr: bool = False
    grad_clip: Optional[float] = None
    weights: LossWeights = field(default_factory=LossWeights)
    hsic: HsicConfig = field(default_factory=HsicConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig.tiny)

    def __post_init__(self):
        if self.out_dir is not None:
            self.out_dir = Path(self.out_dir)
        for name in ("shots", "batch_size"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                raise ConfigError(f"{name} must be a positive integer, got {v!r}")
        if not isinstance(self.epochs, int) or self.epochs < 0:
            raise ConfigError(f"epochs must be a non-negative integer, got {self.epochs!r}")
        check_non_negative(self.learning_rate, "learning_rate")
        check_non_negative(self.momentum, "momentum")
        if not isinstance(self.lora_rank, int) or self.lora_rank < 1:
            raise ConfigError(f"lora_rank must be a positive integer, got {self.lora_rank!r}")
        check_positive(self.lora_scale, "lora_scale")
        if not isinstance(self.prompt_depth, int) or self.prompt_depth < 0:
            raise ConfigError(f"prompt_depth must be >= 0, got {self.prompt_depth!r}")
        if not isinstance(self.prompt_width, int) or self.prompt_width < 1:
            raise ConfigError(f"prompt_width must be >= 1, got {self.prompt_width!r}")
        if self.loss_mode not in ("full", "ce_only"):
            raise ConfigError(f"loss_mode must be 'full' or 'ce_only', got {self.loss_mode!r}")
        if self.grad_clip is not None:
            check_positive(self.grad_clip, "grad_clip")
        if self.prompt_depth > min(self.backbone.vision_layers, self.backbone.text_layers):
            raise ConfigError(
                f"prompt_depth ({self.prompt_depth}) exceeds the shallower tower "
                f"({min(self.backbone.vision_layers, self.backbone.text_layers)} layers)"
            )
        if self.lora_rank >= min(self.backbone.text_dim, self.backbone.vision_dim):
            raise ConfigError(
                f"lora_rank ({self.lora_rank}) must be smaller than the tower width"
            )


@dataclass
class SyntheticBenchConfig:
    """Procedural benchmark with a controllable class/spurious-cue correlation."""

    num_classes: int = 4
    train_per_class: int = 16
    test_id_per_class: int = 32
    test_ood_per_class: int = 32
    image_size: int = 32
    spurious_channel: str = "border_color"   # "border_color" | "corner_patch"
    rho_train: float = 0.95
    rho_ood: float = 0.25
    caption_spurious: bool = True
    seed: int = 0

    def __post_init__(self):
        if not isinstance(self.num_classes, int) or self.num_classes < 2:
            raise ConfigError(f"num_classes must be an integer >= 2, got {self.num_classes!r}")
        for name in ("train_per_class", "test_id_per_class", "test_ood_per_class"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                raise ConfigError(f"{name} must be a positive integer, got {v!r}")
        if not isinstance(self.image_size, int) or self.image_size < 16:
            raise ConfigError(f"image_size must be an integer >= 16, got {self.image_size!r}")
        if self.spurious_channel not in ("border_color", "corner_patch"):
            raise ConfigError(
                f"spurious_channel must be 'border_color' or 'corner_patch', "
                f"got {self.spurious_channel!r}"
            )
        check_in_range(self.rho_train, 0.0, 1.0, "rho_train")
        check_in_range(self.rho_ood, 0.0, 1.0, "rho_ood")


@dataclass
class CaptionerEndpoint:
    """Connection settings for an external captioning service."""

    base_url: str = "http://localhost:8080"
    timeout: float = 10.0
    retries: int = 2
    auth_token: Optional[str] = None
    prompt: str = "Describe the clinically relevant findings in this image."

    def __post_init__(self):
        check_positive(self.timeout, "captioner.timeout")
        if not isinstance(self.retries, int) or self.retries < 0:
            raise ParameterError(f"captioner.retries must be >= 0, got {self.retries!r}")


@dataclass
class CurationRules:
    """Rule-based caption filter; failing captions are replaced by the template."""

    min_tokens: int = 3
    banned_phrases: tuple = ("i cannot", "as an ai", "sorry", "image of an image")
    require_class_term: bool = True

    def __post_init__(self):
        if not isinstance(self.min_tokens, int) or self.min_tokens < 1:
            raise ParameterError(f"curation.min_tokens must be >= 1, got {self.min_tokens!r}")
        self.banned_phrases = tuple(str(p).lower() for p in self.banned_phrases)


# ---------------------------------------------------------------------------
# Flat key-value serialization
# ---------------------------------------------------------------------------

_NESTED_TRAIN_FIELDS = {"weights": LossWeights, "hsic": HsicConfig, "backbone": BackboneConfig}


def train_config_to_flat(cfg: TrainConfig) -> dict:
    """Flatten a TrainConfig into a {key: scalar} mapping with dotted keys."""
    flat: dict = {}
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        if f.name in _NESTED_TRAIN_FIELDS:
            for sub in dataclasses.fields(value):
                flat[f"{f.name}.{sub.name}"] = getattr(value, sub.name)
        elif isinstance(value, Path):
            flat[f.name] = str(value)
        else:
            flat[f.name] = value
    return flat


def train_config_from_flat(flat: dict, base: TrainConfig | None = None) -> TrainConfig:
    """Rebuild a TrainConfig from a flat mapping; unknown keys are an error.

    Keys absent from ``flat`` keep the value they have in ``base`` (a default
    TrainConfig when not given), so partial override mappings work.
    """
    top_fields = {f.name for f in dataclasses.fields(TrainConfig)}
    sub_fields = {
        name: {f.name for f in dataclasses.fields(cls)}
        for name, cls in _NESTED_TRAIN_FIELDS.items()
    }
    for key in flat:
        if "." in key:
            head, _, tail = key.partition(".")
            if head not in sub_fields or tail not in sub_fields[head]:
                raise ConfigError(f"unknown config key: {key!r}")
        elif key not in top_fields or key in _NESTED_TRAIN_FIELDS:
            raise ConfigError(f"unknown config key: {key!r}")
    complete = train_config_to_flat(base if base is not None else TrainConfig())
    complete.update(flat)
    top: dict = {}
    nested: dict = {name: {} for name in _NESTED_TRAIN_FIELDS}
    for key, value in complete.items():
        if "." in key:
            head, _, tail = key.partition(".")
            nested[head][tail] = value
        else:
            top[key] = value
    kwargs = dict(top)
    for name, cls in _NESTED_TRAIN_FIELDS.items():
        try:
            kwargs[name] = cls(**nested[name])
        except TypeError as exc:
            raise ConfigError(f"bad {name} config: {exc}") from exc
    try:
        return TrainConfig(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"bad train config: {exc}") from exc


def load_train_config(path, overrides: dict | None = None) -> TrainConfig:
    """Load a flat YAML config file and apply ``--set`` style overrides on top."""
    try:
        fh = open(path, "r", encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    with fh:
        try:
            flat = yaml.safe_load(fh) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse config file {path}: {exc}") from exc
    if not isinstance(flat, dict):
        raise ConfigError(f"config file {path} must contain a flat mapping")
    if overrides:
        flat.update(overrides)
    return train_config_from_flat(flat)


def save_train_config(cfg: TrainConfig, path) -> None:
    flat = train_config_to_flat(cfg)
    flat = {k: (tuple(v) if isinstance(v, list) else v) for k, v in flat.items()}
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(
            {k: (list(v) if isinstance(v, tuple) else v) for k, v in flat.items()},
            fh,
            sort_keys=True,
            default_flow_style=False,
        )


def parse_override(item: str) -> tuple[str, object]:
    """Parse one ``key=value`` override; values go through YAML for typing."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} must look like key=value")
    key, _, raw = item.partition("=")
    key = key.strip()
    if not key:
        raise ConfigError(f"override {item!r} has an empty key")
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse override value {raw!r}: {exc}") from exc
    return key, value
