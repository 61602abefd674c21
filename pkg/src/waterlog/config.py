"""Run configuration: nested dataclasses loaded from a single JSON document.

Defaults follow the published training recipe (tau=0.95, tau_s=0.8,
lambda=1, 2+2 batches, lr 2e-4, 30 epochs, jitter ranges). Backbone sizes
default to a desk-scale toy encoder.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


@dataclass
class BackboneConfig:
    stage_depths: tuple = (1, 1, 2, 1)
    stage_channels: tuple = (16, 32, 48, 64)
    neck_channels: int = 32
    patch_stride: int = 4
    attention_heads: int = 2
    input_size: tuple = (64, 64)
    in_channels: int = 3
    mlp_ratio: float = 2.0
    # inputs are RGB in [0, 1]; the model normalizes internally
    pixel_mean: tuple = (0.485, 0.456, 0.406)
    pixel_std: tuple = (0.229, 0.224, 0.225)

    def __post_init__(self):
        if len(self.stage_depths) != 4 or len(self.stage_channels) != 4:
            raise ConfigError("backbone needs exactly four stages")
        if any(int(d) < 1 for d in self.stage_depths):
            raise ConfigError("stage_depths must all be >= 1")
        ch = [int(c) for c in self.stage_channels]
        if any(c <= 0 for c in ch) or any(b <= a for a, b in zip(ch, ch[1:])):
            raise ConfigError("stage_channels must be positive and strictly increasing")
        for c in ch:
            if c % self.attention_heads:
                raise ConfigError(f"channels {c} not divisible by attention_heads {self.attention_heads}")
        if self.neck_channels <= 0 or self.neck_channels % 2:
            raise ConfigError("neck_channels must be a positive even number")
        if self.patch_stride <= 0:
            raise ConfigError("patch_stride must be positive")
        total = self.patch_stride * 8
        h, w = self.input_size
        if h % total or w % total:
            raise ConfigError(f"input_size {self.input_size} not divisible by total stride {total}")

    @property
    def total_stride(self) -> int:
        return self.patch_stride * 8


@dataclass
class AdaptationConfig:
    use_lora: bool = True
    use_adapter: bool = True
    # False means g == 1 everywhere: plain stacked Adapter + LoRA
    use_gate: bool = True
    lora_rank: int = 4
    lora_scale: float | None = None  # None -> 1 / rank
    adapter_hidden: int = 16
    freq_mask_ratio: float = 0.25
    encoder_tune_ratio: float = 1.0
    train_base: bool = False

    def __post_init__(self):
        if self.lora_rank < 1:
            raise ConfigError("lora_rank must be >= 1")
        if not 0.0 <= self.encoder_tune_ratio <= 1.0:
            raise ConfigError("encoder_tune_ratio must lie in [0, 1]")
        if not 0.0 <= self.freq_mask_ratio < 1.0:
            raise ConfigError("freq_mask_ratio must lie in [0, 1)")


@dataclass
class AugmentationConfig:
    resize_scale_range: tuple = (0.75, 1.25)
    crop_size: tuple = (64, 64)
    hflip_prob: float = 0.5
    jitter_prob: float = 0.8
    brightness: tuple = (0.5, 1.5)
    contrast: tuple = (0.5, 1.5)
    saturation: tuple = (0.5, 1.5)
    hue: tuple = (-0.25, 0.25)
    gray_prob: float = 0.1
    blur_prob: float = 0.5
    blur_sigma: tuple = (0.1, 2.0)

    def __post_init__(self):
        for name in ("hflip_prob", "jitter_prob", "gray_prob", "blur_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        for name in ("resize_scale_range", "brightness", "contrast", "saturation", "hue", "blur_sigma"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigError(f"{name} range is not ordered")
        if self.resize_scale_range[0] <= 0:
            raise ConfigError("resize scale must be positive")
        if self.hue[0] < -0.5 or self.hue[1] > 0.5:
            raise ConfigError("hue shift must stay within half a turn")


@dataclass
class S2MatchConfig:
    tau: float = 0.95
    tau_s: float = 0.8
    lambda_u: float = 1.0
    p_skip: float = 0.5
    gamma_cap: float = 0.996
    batch_labeled: int = 2
    batch_unlabeled: int = 2
    lr0: float = 2e-4
    weight_decay: float = 0.01
    epochs: int = 30
    poly_power: float = 0.9
    binarize_threshold: float = 0.5
    sc_enabled: bool = True
    sd_enabled: bool = True
    cd_enabled: bool = True
    eps: float = 1e-7
    seed: int = 0

    def __post_init__(self):
        if not 0.5 <= self.tau_s <= self.tau < 1.0:
            raise ConfigError("need 0.5 <= tau_s <= tau < 1")
        if not 0.0 <= self.p_skip < 1.0:
            raise ConfigError("p_skip must lie in [0, 1)")
        if self.lambda_u < 0:
            raise ConfigError("lambda_u must be >= 0")
        if not 0.0 < self.binarize_threshold < 1.0:
            raise ConfigError("binarize_threshold must lie in (0, 1)")
        if self.batch_labeled < 1 or self.batch_unlabeled < 0:
            raise ConfigError("batch sizes must be positive")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")


@dataclass
class DataConfig:
    root: str = "data/toy"
    unlabeled_ratio: float = 1.0
    val_split: str = "val"

    def __post_init__(self):
        if not 0.0 <= self.unlabeled_ratio <= 1.0:
            raise ConfigError("unlabeled_ratio must lie in [0, 1]")


@dataclass
class ClientConfig:
    kind: str = "mock"  # mock | http | replay
    endpoint: str = "http://localhost:8000/v1/chat/completions"
    model: str = "deepseek-vl2-small"
    token_env: str = "WATERLOG_API_TOKEN"
    timeout: float = 60.0
    max_in_flight: int = 4
    max_retries: int = 3
    backoff: float = 0.5
    record_path: str | None = None
    replay_path: str | None = None
    templates_dir: str | None = None
    semantic: bool = True
    spatial: bool = True
    structural: bool = True
    grid: tuple = (3, 3)

    def __post_init__(self):
        if self.kind not in ("mock", "http", "replay"):
            raise ConfigError(f"unknown client kind {self.kind!r}")
        if self.kind == "replay" and not self.replay_path:
            raise ConfigError("replay client needs replay_path")
        if self.max_in_flight < 1 or self.max_retries < 0:
            raise ConfigError("max_in_flight >= 1 and max_retries >= 0 required")


@dataclass
class OutputConfig:
    root: str = "runs"
    eval_model: str = "teacher"
    pr_thresholds: int = 99
    # a named run directory replaces the timestamp prefix (reproducible paths)
    run_name: str | None = None

    def __post_init__(self):
        if self.eval_model not in ("teacher", "student"):
            raise ConfigError("eval_model must be 'teacher' or 'student'")


@dataclass
class RunConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    adaptation: AdaptationConfig = field(default_factory=AdaptationConfig)
    augment: AugmentationConfig = field(default_factory=AugmentationConfig)
    s2match: S2MatchConfig = field(default_factory=S2MatchConfig)
    data: DataConfig = field(default_factory=DataConfig)
    report_client: ClientConfig = field(default_factory=ClientConfig)
    evaluator: ClientConfig = field(default_factory=ClientConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:12]


def _build(cls, data: dict, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected an object")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"{path or 'config'}: unknown keys {unknown}")
    kwargs = {}
    defaults = cls()
    for name, value in data.items():
        current = getattr(defaults, name)
        where = f"{path}.{name}" if path else name
        if dataclasses.is_dataclass(current):
            kwargs[name] = _build(type(current), value, where)
        elif isinstance(current, tuple):
            if not isinstance(value, (list, tuple)):
                raise ConfigError(f"{where}: expected a list")
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except ConfigError as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from None
    except TypeError as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from None


def config_from_dict(data: dict) -> RunConfig:
    return _build(RunConfig, data, "")


def _parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    """Apply ``dot.path=value`` overrides (values parsed as JSON when possible)."""
    data = json.loads(json.dumps(data))
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        node = data
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} descends into a non-object")
        node[parts[-1]] = _parse_value(raw)
    return data


def load_config(path: str | Path | None, overrides: list[str] | None = None) -> RunConfig:
    data: dict = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return config_from_dict(apply_overrides(data, overrides or []))
