"""Run configuration: nested sections, presets, strict loading and resolved dumps."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path
from typing import Any

import yaml

from .seqdata import DomainError


class ConfigError(DomainError):
    pass


@dataclass
class NetworkSection:
    layer_sizes: list[int] = field(default_factory=lambda: [121, 60, 30, 15, 10, 10, 10])
    time_constants: list[float] = field(default_factory=lambda: [2.0, 4.0, 8.0, 16.0, 32.0, 64.0, 128.0])


@dataclass
class CodecSection:
    rows: int = 11
    cols: int = 11
    sharpness: float = 150.0


@dataclass
class TrainingSection:
    w_values: list[float] = field(default_factory=lambda: [0.0, 0.01, 0.1, 0.2])
    epochs: int = 100_000
    batch_size: int = 8
    alpha: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    init_log_var: float = 0.0
    gradient_clip: float | None = None
    checkpoint_every: int = 0
    # optional exponential step-size decay from alpha_decay_start onwards
    alpha_half_life: float | None = None
    alpha_decay_start: int = 0


@dataclass
class DataSection:
    # "targen": closed-loop stream of a trained target generator;
    # "renderer": the prototype renderer stream itself
    generator: str = "targen"
    sequences: int = 16
    slice_length: int = 400
    total_steps: int = 100_000
    discard_fraction: float = 0.5
    noise_sigma: float = 0.1
    steps_per_cycle: int = 20
    amplitude_jitter: float = 0.1
    period_jitter: float = 0.1
    prototypes: int = 30


@dataclass
class TargenSection:
    epochs: int = 100_000
    alpha: float = 1e-3
    init_log_var: float = -10.0


@dataclass
class ClassifierSection:
    layer_sizes: list[int] = field(default_factory=lambda: [60, 30, 10])
    time_constants: list[float] = field(default_factory=lambda: [2.0, 8.0, 32.0])
    epochs: int = 2000
    alpha: float = 1e-2
    batch_size: int = 8
    init_log_var: float = -10.0
    chunk_length: int = 120
    prototypes: int = 30
    min_run_fraction: float = 0.25


@dataclass
class AnalysisSection:
    threshold: float = 0.025
    ngram: int = 3
    epsilon: float = 1e-6
    free_run_steps: int = 100_000
    reference_steps: int = 100_000
    ads_repeats: int = 10
    max_lag: int = 500
    sigma_units: int = 2


@dataclass
class RunConfig:
    preset: str = "paper"
    seed: int = 0
    threads: int = 1
    network: NetworkSection = field(default_factory=NetworkSection)
    codec: CodecSection = field(default_factory=CodecSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    data: DataSection = field(default_factory=DataSection)
    targen: TargenSection = field(default_factory=TargenSection)
    classifier: ClassifierSection = field(default_factory=ClassifierSection)
    analysis: AnalysisSection = field(default_factory=AnalysisSection)

    def validate(self) -> "RunConfig":
        net = self.network
        if len(net.layer_sizes) != len(net.time_constants) or not net.layer_sizes:
            raise ConfigError("network.layer_sizes and network.time_constants must have equal, non-zero length")
        if any(w < 0 or w > 1 for w in self.training.w_values) or not self.training.w_values:
            raise ConfigError("training.w_values must be non-empty and lie in [0, 1]")
        if self.data.generator not in ("targen", "renderer"):
            raise ConfigError(f"data.generator must be 'targen' or 'renderer', got {self.data.generator!r}")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        if self.seed < 0:
            raise ConfigError("seed must be a non-negative integer")
        need = self.data.sequences * self.data.slice_length
        avail = self.data.total_steps - int(self.data.total_steps * self.data.discard_fraction)
        if need > avail:
            raise ConfigError(f"data: {self.data.sequences} x {self.data.slice_length} steps do not fit in "
                              f"the {avail} steps kept from total_steps={self.data.total_steps}")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def write(self, path) -> Path:
        """Write the fully-resolved configuration as sorted JSON."""
        path = Path(path)
        path.write_text(self.dumps())
        return path


def _desk() -> RunConfig:
    return RunConfig(
        preset="desk",
        network=NetworkSection([30, 10, 5], [2.0, 8.0, 32.0]),
        codec=CodecSection(9, 9, 150.0),
        training=TrainingSection(epochs=10_000, alpha=1e-2, alpha_half_life=1000.0, alpha_decay_start=7500),
        data=DataSection(generator="renderer", sequences=8, total_steps=6400, steps_per_cycle=12,
                         period_jitter=0.02),
        targen=TargenSection(epochs=4000, alpha=1e-2),
        classifier=ClassifierSection(layer_sizes=[30, 10, 5], epochs=500),
        analysis=AnalysisSection(free_run_steps=2000, reference_steps=20_000, max_lag=200),
    )


PRESETS = {"paper": RunConfig, "desk": _desk}


def preset(name: str) -> RunConfig:
    try:
        return PRESETS[name]()
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


def _merge(obj, overrides: dict, where: str):
    if not isinstance(overrides, dict):
        raise ConfigError(f"{where or 'config'}: expected a mapping, got {type(overrides).__name__}")
    known = {f.name: f for f in fields(obj)}
    changes = {}
    for key, value in overrides.items():
        path = f"{where}.{key}" if where else key
        if key not in known:
            raise ConfigError(f"unknown config key {path!r}")
        current = getattr(obj, key)
        if is_dataclass(current):
            changes[key] = _merge(current, value, path)
        else:
            changes[key] = _coerce(current, value, path)
    return replace(obj, **changes)


def _coerce(current: Any, value: Any, path: str) -> Any:
    if value is None or current is None:
        return value
    if isinstance(current, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected a boolean, got {value!r}")
        return value
    if isinstance(current, list):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list, got {value!r}")
        kind = type(current[0]) if current else None
        return [_coerce(kind(0), v, path) if kind else v for v in value]
    if isinstance(current, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if isinstance(current, float):
        if isinstance(value, str):
            # YAML 1.1 reads exponent forms such as 1e-6 as strings
            try:
                return float(value)
            except ValueError:
                pass
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if isinstance(current, str) and not isinstance(value, str):
        raise ConfigError(f"{path}: expected a string, got {value!r}")
    return value


def from_dict(data: dict | None, base: str | None = None) -> RunConfig:
    """Build a config from a mapping; ``preset`` (or ``base``) selects the defaults."""
    data = dict(data or {})
    name = data.get("preset", base or "paper")
    cfg = _merge(preset(name), data, "")
    return cfg.validate()


def load_config(path, base: str | None = None) -> RunConfig:
    """Load a YAML or JSON configuration file (JSON is valid YAML)."""
    path = Path(path)
    try:
        text = path.read_text()
        data = json.loads(text) if path.suffix.lower() == ".json" else yaml.safe_load(text)
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML/JSON ({exc})") from None
    try:
        return from_dict(data or {}, base)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from None
