"""Run configuration: one flat JSON document with validated fields."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

MODES = ("ours", "semantic_only", "collaborative_only", "concat", "random_codes")
VARIANTS = ("collaborative", "mean")
SPLITS = ("valid", "test")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # data
    interactions: str | None = None
    semantic: str | None = None
    min_core: int = 5
    synth_categories: int = 8
    synth_items_per_category: int = 32
    synth_users: int = 2000
    synth_sequence_length: int = 12
    synth_persistence: float = 0.9
    synth_noise: float = 0.1
    synth_semantic_dim: int = 64
    # architecture
    embedding_dim: int = 96
    d_model: int = 96
    heads: int = 6
    hidden: int = 256
    encoder_layers: int = 1
    decoder_layers: int = 4
    max_history: int = 20
    dropout: float = 0.0
    # quantizer
    clusters: int = 256
    depth: int = 4
    # optimisation
    lr: float = 1e-3
    stage1_batch_size: int = 256
    stage2_batch_size: int = 256
    stage1_steps: int = 20000
    stage2_steps: int = 20000
    warmup_steps: int = 2000
    warmup_init_lr: float = 1e-7
    weight_decay: float = 1e-7
    alpha: float = 1.0
    beta: float = 1.0
    tau: float = 1.0
    n_neg: int = 128
    seed: int = 2024
    # variants
    mode: str = "ours"
    variant: str = "collaborative"
    ablate_modes: list[str] = field(default_factory=lambda: list(MODES))
    # evaluation
    beam_width: int = 100
    ks: list[int] = field(default_factory=lambda: [10, 20])
    split: str = "test"
    bench_queries: int = 100
    dominance_clusters: int = 10

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        positive = ["synth_categories", "synth_items_per_category", "synth_users", "synth_semantic_dim",
                    "embedding_dim", "d_model", "heads", "hidden", "encoder_layers", "decoder_layers", "max_history",
                    "clusters", "depth", "stage1_batch_size", "stage2_batch_size", "n_neg", "beam_width",
                    "bench_queries", "dominance_clusters", "min_core"]
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for name in ("stage1_steps", "stage2_steps", "warmup_steps"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.synth_sequence_length < 3:
            raise ConfigError("synth_sequence_length must be >= 3")
        if not 0.0 <= self.synth_persistence <= 1.0:
            raise ConfigError("synth_persistence must lie in [0, 1]")
        for name in ("synth_noise", "alpha", "beta", "weight_decay"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        for name in ("lr", "warmup_init_lr", "tau"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be > 0")
        if self.dropout != 0.0:
            raise ConfigError("dropout other than 0 is not supported")
        if self.d_model % self.heads:
            raise ConfigError(f"d_model {self.d_model} is not divisible by heads {self.heads}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {', '.join(MODES)}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {', '.join(VARIANTS)}")
        if self.split not in SPLITS:
            raise ConfigError(f"split must be one of {', '.join(SPLITS)}")
        bad = [m for m in self.ablate_modes if m not in MODES]
        if bad or not self.ablate_modes:
            raise ConfigError(f"ablate_modes must be a non-empty subset of {', '.join(MODES)}")
        if not self.ks or min(self.ks) < 1:
            raise ConfigError("ks must be a non-empty list of positive integers")
        if self.beam_width < max(self.ks):
            raise ConfigError(f"beam_width {self.beam_width} < largest K {max(self.ks)}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def replace(self, **changes) -> "RunConfig":
        return from_dict({**self.to_dict(), **changes})


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}

# small enough for a laptop run of the whole pipeline in about a minute per seed
PRESETS: dict[str, dict] = {
    "default": {},
    "desk": {
        "embedding_dim": 32, "d_model": 32, "heads": 4, "hidden": 64, "decoder_layers": 2,
        "clusters": 8, "depth": 3, "stage1_steps": 600, "stage2_steps": 600, "stage2_batch_size": 64,
        "warmup_steps": 100, "beam_width": 20, "bench_queries": 20,
    },
}


def _coerce(name: str, value):
    kind = _FIELDS[name].type
    if value is None:
        if "None" in kind:
            return None
        raise ConfigError(f"{name} may not be null")
    if kind in ("int",):
        if isinstance(value, bool) or not isinstance(value, int):
            if isinstance(value, float) and value.is_integer():
                return int(value)
            raise ConfigError(f"{name} must be an integer, got {value!r}")
        return value
    if kind == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{name} must be a number, got {value!r}")
        return float(value)
    if kind.startswith("str"):
        if not isinstance(value, str):
            raise ConfigError(f"{name} must be a string, got {value!r}")
        return value
    if kind == "list[int]":
        if not isinstance(value, list) or not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
            raise ConfigError(f"{name} must be a list of integers")
        return list(value)
    if kind == "list[str]":
        if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
            raise ConfigError(f"{name} must be a list of strings")
        return list(value)
    raise ConfigError(f"{name}: unsupported field type {kind}")


def from_dict(data: dict) -> RunConfig:
    unknown = sorted(set(data) - set(_FIELDS))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    return RunConfig(**{k: _coerce(k, v) for k, v in data.items()})


def parse_override(text: str) -> tuple[str, object]:
    """``key=value``; the value is read as JSON, falling back to a bare string."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not key=value")
    key, raw = text.split("=", 1)
    key = key.strip()
    if key not in _FIELDS:
        raise ConfigError(f"unknown config key {key!r}")
    if _FIELDS[key].type.startswith("list") and not raw.lstrip().startswith("["):
        parts = [p.strip() for p in raw.split(",") if p.strip()]
        if _FIELDS[key].type == "list[str]":
            return key, parts
        try:
            return key, [int(p) for p in parts]
        except ValueError:
            raise ConfigError(f"{key} must be a comma-separated list of integers") from None
    try:
        return key, json.loads(raw)
    except json.JSONDecodeError:
        return key, raw


def load_config(path: str | Path | None = None, overrides: list[str] = (), preset: str = "default") -> RunConfig:
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {', '.join(PRESETS)}")
    data = dict(PRESETS[preset])
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        try:
            loaded = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: top level must be an object")
        data.update(loaded)
    for item in overrides:
        key, value = parse_override(item)
        data[key] = value
    return from_dict(data)
