"""Experiment configuration in a small ``key = value`` text format.

One setting per line, ``#`` starts a comment, values are integers, floats,
booleans (``true``/``false``), bare or double-quoted strings, or
comma-separated lists. Per-device settings accept either one value for all
devices or one value per device.
"""
from __future__ import annotations

import dataclasses
import shlex
from dataclasses import dataclass, fields

from . import cost
from .assignment import DeviceSpec
from .data import SyntheticDatasetSpec
from .simulator import DEFAULT_BANDWIDTH_MBPS, DEFAULT_THROUGHPUT, Fleet
from .vit import InvalidConfigError, ViTConfig, preset


class ConfigError(ValueError):
    """Malformed or invalid configuration; ``line`` is 1-based when known."""

    def __init__(self, message: str, line: int | None = None, text: str | None = None):
        self.line = line
        where = f"line {line}: " if line is not None else ""
        context = f"\n    {text.strip()}" if text else ""
        super().__init__(f"{where}{message}{context}")


MODEL_KEYS = ("depth", "d", "h", "c", "image_size", "patch_size", "channels", "num_classes")


@dataclass(frozen=True)
class ExperimentConfig:
    preset: str = "vit-tiny"
    model: tuple[tuple[str, int], ...] = ()  # explicit overrides of the preset, sorted by key
    mode: str = "full"  # "full": real weights and data; "cost": analytic sub-models only
    n_devices: int = 1
    device_counts: tuple[int, ...] = (1, 2, 4)  # swept by the report command
    memory_mib: tuple[float, ...] = (512.0,)
    energy_gflop: tuple[float, ...] = (20.0,)
    throughput: tuple[float, ...] = (DEFAULT_THROUGHPUT,)
    bandwidth_mbps: tuple[float, ...] = (DEFAULT_BANDWIDTH_MBPS,)
    aggregator_throughput: float = DEFAULT_THROUGHPUT
    budget_mib: float = 100.0
    L: int = 1
    required_accuracy: float = 0.0
    shrink: float = 0.5
    hp: tuple[int, ...] = ()  # initial heads pruned per sub-model; empty means all zero
    seed: int = 0
    retrain: bool = True
    batch_size: int = 256
    head_epochs: int = 10
    head_lr: float = 1e-4
    fusion_epochs: int = 10
    fusion_lr: float = 1e-4
    calib_size: int = 256
    samples_per_class: int = 40
    separation: float = 4.0
    data_seed: int = 0

    def __post_init__(self):
        try:
            cfg = self.vit_config()
        except InvalidConfigError as exc:
            raise ConfigError(str(exc)) from None
        if self.mode not in ("full", "cost"):
            raise ConfigError(f"mode must be 'full' or 'cost', got {self.mode!r}")
        if self.n_devices < 1 or any(n < 1 for n in self.device_counts):
            raise ConfigError("device counts must be >= 1")
        if self.budget_mib <= 0:
            raise ConfigError(f"budget_mib must be positive, got {self.budget_mib}")
        if self.L < 1:
            raise ConfigError("L must be >= 1")
        if not 0.0 < self.shrink <= 1.0:
            raise ConfigError(f"shrink must lie in (0, 1], got {self.shrink}")
        if not 0.0 <= self.required_accuracy <= 1.0:
            raise ConfigError("required_accuracy must lie in [0, 1]")
        for name in ("memory_mib", "energy_gflop", "throughput", "bandwidth_mbps"):
            values = getattr(self, name)
            if not values or any(v <= 0 for v in values):
                raise ConfigError(f"{name} values must be positive")
        if self.aggregator_throughput <= 0:
            raise ConfigError("aggregator_throughput must be positive")
        if self.hp and len(self.hp) != self.n_devices:
            raise ConfigError(f"hp has {len(self.hp)} entries but n_devices is {self.n_devices}")
        if any(not 0 <= v < cfg.h for v in self.hp):
            raise ConfigError(f"hp entries must lie in [0, {cfg.h})")
        for name in ("batch_size", "calib_size", "samples_per_class"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.head_epochs < 0 or self.fusion_epochs < 0:
            raise ConfigError("epoch counts must be non-negative")
        if self.separation < 0:
            raise ConfigError("separation must be non-negative")

    def vit_config(self) -> ViTConfig:
        base = preset(self.preset)
        return dataclasses.replace(base, **dict(self.model), head_dim=None)

    def with_overrides(self, **changes) -> "ExperimentConfig":
        changes = {k: v for k, v in changes.items() if v is not None}
        if "n_devices" in changes and self.hp and len(self.hp) != changes["n_devices"]:
            changes.setdefault("hp", ())
        return dataclasses.replace(self, **changes)

    def dataset_spec(self) -> SyntheticDatasetSpec:
        cfg = self.vit_config()
        return SyntheticDatasetSpec(
            num_classes=cfg.num_classes,
            samples_per_class=self.samples_per_class,
            image_size=cfg.image_size,
            channels=cfg.channels,
            separation=self.separation,
            seed=self.data_seed,
        )

    def fleet(self, n: int | None = None) -> Fleet:
        n = self.n_devices if n is None else n

        def per_device(name):
            values = getattr(self, name)
            if len(values) == 1:
                return values * n
            if len(values) != n:
                raise ConfigError(f"{name} lists {len(values)} values for {n} devices")
            return values

        mem, energy, tput, bw = (per_device(k) for k in ("memory_mib", "energy_gflop", "throughput", "bandwidth_mbps"))
        devices = tuple(
            DeviceSpec(i, mem[i] * cost.MIB, energy[i] * 1e9, tput[i]) for i in range(n)
        )
        aggregator = DeviceSpec(n, max(mem) * cost.MIB, max(energy) * 1e9, self.aggregator_throughput)
        return Fleet(devices, aggregator, {i: bw[i] for i in range(n)})

    @property
    def budget_bytes(self) -> float:
        return self.budget_mib * cost.MIB


_FIELDS = {f.name: f for f in fields(ExperimentConfig)}
_TUPLE_TYPES = {
    "device_counts": int, "memory_mib": float, "energy_gflop": float, "throughput": float,
    "bandwidth_mbps": float, "hp": int,
}


def _scalar(raw: str, kind):
    if kind is bool:
        low = raw.lower()
        if low in ("true", "yes", "1"):
            return True
        if low in ("false", "no", "0"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if kind is int:
        value = float(raw)
        if not value.is_integer():
            raise ValueError(f"expected an integer, got {raw!r}")
        return int(value)
    if kind is float:
        return float(raw)
    return raw


def _field_kind(name):
    default = _FIELDS[name].default
    return type(default) if default is not dataclasses.MISSING else str


def parse_config(text: str) -> ExperimentConfig:
    """Parse and validate config text; defaults fill anything unspecified."""
    values: dict = {}
    model: dict[str, int] = {}
    seen: dict[str, int] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError("expected 'key = value'", lineno, line)
        key, raw = (part.strip() for part in body.split("=", 1))
        if key in seen:
            raise ConfigError(f"duplicate key {key!r} (first set on line {seen[key]})", lineno, line)
        seen[key] = lineno
        try:
            raw = " ".join(shlex.split(raw)) if raw.startswith('"') else raw
        except ValueError as exc:
            raise ConfigError(f"bad quoting: {exc}", lineno, line) from None
        if not raw:
            if key == "hp":
                values["hp"] = ()
                continue
            raise ConfigError(f"missing value for {key!r}", lineno, line)
        try:
            if key.startswith("model."):
                name = key[len("model."):]
                if name not in MODEL_KEYS:
                    raise ValueError(f"unknown model field {name!r}; expected one of {', '.join(MODEL_KEYS)}")
                model[name] = _scalar(raw, int)
            elif key in _TUPLE_TYPES:
                values[key] = tuple(_scalar(v.strip(), _TUPLE_TYPES[key]) for v in raw.split(","))
            elif key in _FIELDS and key != "model":
                values[key] = _scalar(raw, _field_kind(key))
            else:
                raise ValueError(f"unknown key {key!r}")
        except ValueError as exc:
            raise ConfigError(str(exc), lineno, line) from None
    if model:
        values["model"] = tuple(sorted(model.items()))
    try:
        return ExperimentConfig(**values)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def serialize_config(config: ExperimentConfig) -> str:
    """Canonical text form; ``parse_config(serialize_config(c)) == c``."""
    lines = []
    for f in fields(ExperimentConfig):
        value = getattr(config, f.name)
        if f.name == "model":
            lines.extend(f"model.{k} = {v}" for k, v in value)
        elif isinstance(value, tuple):
            lines.append(f"{f.name} = {', '.join(repr(v) for v in value)}")
        elif isinstance(value, bool):
            lines.append(f"{f.name} = {'true' if value else 'false'}")
        else:
            lines.append(f"{f.name} = {value!r}" if not isinstance(value, str) else f"{f.name} = {value}")
    return "\n".join(lines) + "\n"


def load_config(path) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())
