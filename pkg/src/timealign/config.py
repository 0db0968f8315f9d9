"""Experiment configuration: dataclasses plus flat ``key=value`` files.

Config files hold one ``section.key = value`` pair per line; ``#`` starts a
comment.  Values are parsed with the type of the matching dataclass field.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional


class ConfigError(ValueError):
    pass


@dataclass
class GenConfig:
    seed: int = 0
    num_videos: int = 250
    val_videos: int = 50
    min_sec: float = 30.0
    max_sec: float = 1200.0
    fps: float = 25.0
    stride: int = 8
    channels: int = 32
    num_classes: int = 5
    instances_per_minute: float = 1.0
    class_signature_dim: int = 16
    signal_amplitude: float = 1.0
    noise_std: float = 0.3
    min_gap_sec: float = 1.0
    min_instance_sec: float = 0.5
    max_instance_frac: float = 0.15
    envelope_floor: float = 0.0

    def validate(self):
        if not self.min_sec < self.max_sec:
            raise ConfigError(f"gen.min_sec ({self.min_sec}) must be < gen.max_sec ({self.max_sec})")
        if self.min_sec <= 0:
            raise ConfigError("gen.min_sec must be > 0")
        if self.channels < self.class_signature_dim:
            raise ConfigError("gen.channels must be >= gen.class_signature_dim")
        if self.num_videos < 1 or not 0 <= self.val_videos < self.num_videos:
            raise ConfigError("need gen.num_videos >= 1 and 0 <= gen.val_videos < gen.num_videos")
        if self.fps <= 0 or self.stride < 1 or self.num_classes < 1:
            raise ConfigError("gen.fps, gen.stride and gen.num_classes must be positive")
        if self.instances_per_minute < 0 or self.noise_std < 0 or self.min_gap_sec < 0:
            raise ConfigError("gen.instances_per_minute, gen.noise_std, gen.min_gap_sec must be >= 0")
        if not 0.0 <= self.envelope_floor <= 1.0:
            raise ConfigError("gen.envelope_floor must lie in [0, 1]")


@dataclass
class ModelConfig:
    in_channels: int = 32
    num_classes: int = 5
    dim: int = 64
    num_levels: int = 4
    kernel_size: int = 3
    enc_layers: int = 2
    dec_layers: int = 4
    heads: int = 4
    points: int = 4
    ffn_dim: int = 128
    ablate_enc_self: bool = False
    ablate_dec_self: bool = False
    ablate_dec_cross: bool = False
    expression: str = "time_aligned"  # or "normalized"
    grid_mode: str = "unit_consistent"  # or "paper_literal"
    base_scale: float = 2.0
    select_mode: str = "adaptive"  # or "fixed"
    t_sector: int = 219  # level-1 steps; ~70 s at 25 fps / stride 8
    select_k: int = 10
    fixed_n: int = 40
    detach_refs: bool = True  # stop gradients through reference segments between stages
    query_content: str = "memory"  # decoder content from the query segment ("position") or encoder memory ("memory")

    def validate(self):
        if self.expression not in ("time_aligned", "normalized"):
            raise ConfigError(f"coord.expression must be time_aligned|normalized, got {self.expression!r}")
        if self.grid_mode not in ("unit_consistent", "paper_literal"):
            raise ConfigError(f"coord.mode must be unit_consistent|paper_literal, got {self.grid_mode!r}")
        if self.query_content not in ("position", "memory"):
            raise ConfigError(f"model.query_content must be position|memory, got {self.query_content!r}")
        if self.select_mode not in ("adaptive", "fixed"):
            raise ConfigError(f"select.mode must be adaptive|fixed, got {self.select_mode!r}")
        for name in ("dim", "num_levels", "enc_layers", "dec_layers", "heads", "points", "t_sector",
                     "select_k", "fixed_n", "in_channels", "num_classes", "ffn_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"model setting {name} must be >= 1")
        if self.dim % self.heads:
            raise ConfigError("model.dim must be divisible by model.heads")
        if self.base_scale <= 0:
            raise ConfigError("coord.base_scale must be > 0")
        if self.kernel_size % 2 == 0:
            raise ConfigError("pyramid.kernel_size must be odd")


@dataclass
class LossWeights:
    w_cls: float = 2.0
    w_diou: float = 2.0
    w_logwidth: float = 1.0
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    aux: bool = True

    def validate(self):
        for name in ("w_cls", "w_diou", "w_logwidth"):
            value = getattr(self, name)
            if not (value >= 0 and value < float("inf")):
                raise ConfigError(f"loss.{name} must be finite and >= 0")


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 2
    learning_rate: float = 2e-4
    weight_decay: float = 1e-4
    grad_clip_norm: float = 0.1
    seed: int = 0
    eval_every: int = 0
    checkpoint_dir: Optional[str] = None
    lr_drop_epoch: int = 0
    checkpoint_every: int = 1

    def validate(self):
        if self.epochs < 1:
            raise ConfigError("train.epochs must be >= 1")
        if not self.learning_rate >= 0:
            raise ConfigError("train.learning_rate must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("train.batch_size must be >= 1")
        if self.grad_clip_norm < 0:
            raise ConfigError("train.grad_clip_norm must be >= 0")


@dataclass
class EvalConfig:
    iou_thresholds: list = field(default_factory=lambda: [0.3, 0.4, 0.5, 0.6, 0.7])
    top_n_cap: Optional[int] = None
    length_buckets: Optional[list] = None  # 4 inner edges in seconds; None = quintiles

    def validate(self):
        thr = self.iou_thresholds
        if not thr or any(not 0 < t <= 1 for t in thr) or any(b <= a for a, b in zip(thr, thr[1:])):
            raise ConfigError(f"eval.iou_thresholds must be strictly increasing in (0, 1], got {thr}")
        if self.length_buckets is not None and len(self.length_buckets) != 4:
            raise ConfigError("eval.length_buckets needs exactly 4 inner edges (XS/S/M/L/XL)")


@dataclass
class ExperimentConfig:
    gen: GenConfig = field(default_factory=GenConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> "ExperimentConfig":
        for part in (self.gen, self.model, self.loss, self.train, self.eval):
            part.validate()
        return self

    def to_flat(self) -> dict:
        flat = {}
        for key, (section, name) in KEY_MAP.items():
            flat[key] = getattr(getattr(self, section), name)
        return flat

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        return cls(
            gen=GenConfig(**data.get("gen", {})),
            model=ModelConfig(**data.get("model", {})),
            loss=LossWeights(**data.get("loss", {})),
            train=TrainConfig(**data.get("train", {})),
            eval=EvalConfig(**data.get("eval", {})),
        )

    def copy(self) -> "ExperimentConfig":
        return ExperimentConfig.from_dict(json.loads(json.dumps(self.to_dict())))


def _build_key_map() -> dict:
    mapping = {}
    for f in dataclasses.fields(GenConfig):
        mapping[f"gen.{f.name}"] = ("gen", f.name)
    for f in dataclasses.fields(LossWeights):
        mapping[f"loss.{f.name}"] = ("loss", f.name)
    for f in dataclasses.fields(TrainConfig):
        mapping[f"train.{f.name}"] = ("train", f.name)
    for f in dataclasses.fields(EvalConfig):
        mapping[f"eval.{f.name}"] = ("eval", f.name)
    model_keys = {
        "model.dim": "dim", "model.enc_layers": "enc_layers", "model.dec_layers": "dec_layers",
        "model.heads": "heads", "model.points": "points", "model.ffn_dim": "ffn_dim",
        "model.ablate_enc_self": "ablate_enc_self", "model.ablate_dec_self": "ablate_dec_self",
        "model.ablate_dec_cross": "ablate_dec_cross",
        "pyramid.model_dim": "dim", "pyramid.num_levels": "num_levels",
        "pyramid.kernel_size": "kernel_size",
        "coord.mode": "grid_mode", "coord.base_scale": "base_scale", "coord.expression": "expression",
        "select.mode": "select_mode", "select.t_sector": "t_sector", "select.k": "select_k",
        "select.fixed_n": "fixed_n", "model.detach_refs": "detach_refs",
        "model.query_content": "query_content",
    }
    for key, name in model_keys.items():
        mapping[key] = ("model", name)
    return mapping


KEY_MAP = _build_key_map()

_FIELD_TYPES = {
    cls: {f.name: f for f in dataclasses.fields(cls)}
    for cls in (GenConfig, ModelConfig, LossWeights, TrainConfig, EvalConfig)
}


def _parse_value(raw: str, default: Any, key: str):
    raw = raw.strip()
    if raw.lower() in ("none", "null", ""):
        return None
    if isinstance(default, bool):
        if raw.lower() in ("true", "1", "yes", "on"):
            return True
        if raw.lower() in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    if isinstance(default, int):
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{key}: expected an integer, got {raw!r}") from None
    if isinstance(default, float):
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"{key}: expected a number, got {raw!r}") from None
    if isinstance(default, list) or key in ("eval.iou_thresholds", "eval.length_buckets"):
        try:
            return [float(v) for v in raw.strip("[]").split(",") if v.strip()]
        except ValueError:
            raise ConfigError(f"{key}: expected a comma-separated number list, got {raw!r}") from None
    if key == "eval.top_n_cap":
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{key}: expected an integer, got {raw!r}") from None
    return raw


def set_key(cfg: ExperimentConfig, key: str, raw_value) -> None:
    if key not in KEY_MAP:
        raise ConfigError(f"unknown config key {key!r}")
    section, name = KEY_MAP[key]
    part = getattr(cfg, section)
    default = getattr(part, name)
    if isinstance(raw_value, str):
        if default is None:
            default = _FIELD_TYPES[type(part)][name].default
        value = _parse_value(raw_value, default, key)
    else:
        value = raw_value
    setattr(part, name, value)


def parse_flat(text: str) -> dict:
    pairs = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        pairs[key.strip()] = value.strip()
    return pairs


def load_config(path: str | Path | None = None, overrides: dict | None = None) -> ExperimentConfig:
    cfg = ExperimentConfig()
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        for key, value in parse_flat(text).items():
            set_key(cfg, key, value)
    for key, value in (overrides or {}).items():
        set_key(cfg, key, value)
    return cfg.validate()


def dump_flat(cfg: ExperimentConfig) -> str:
    lines = []
    for key, value in cfg.to_flat().items():
        if key.startswith("pyramid.model_dim"):
            continue
        if isinstance(value, list):
            value = ",".join(repr(v) for v in value)
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"
