"""Unified run configuration: world, shift, bank, adapt and eval sections.

Configs are plain JSON. Unknown keys are rejected with their dotted path and
every stochastic stage carries its own seed.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .alignment import AdaptConfig
from .errors import ConfigError
from .evaluation import ABLATION_METHODS, SWEEP_AXES
from .shiftlab import SHIFT_KINDS, ShiftSpec, WorldSpec

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class BankConfig:
    coreset_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.coreset_fraction <= 1.0:
            raise ConfigError(f"bank.coreset_fraction must lie in (0, 1], got {self.coreset_fraction}")


@dataclass(frozen=True)
class EvalConfig:
    train_fraction: float = 0.2
    split_seed: int = 0
    method: str = "robust-ot"
    seeds: tuple = (0, 1, 2, 3, 4)
    methods: tuple = tuple(ABLATION_METHODS)
    shift_kinds: tuple = ("channel-gain", "additive-gaussian")
    severities: tuple = (3,)
    sweep_axis: str = "severity"
    sweep_values: tuple | None = (0, 1, 2, 3, 4, 5)

    def __post_init__(self):
        for name in ("seeds", "methods", "shift_kinds", "severities"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if self.sweep_values is not None:
            object.__setattr__(self, "sweep_values", tuple(self.sweep_values))
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError(f"eval.train_fraction must lie in (0, 1), got {self.train_fraction}")
        bad = [m for m in self.methods if m not in ABLATION_METHODS]
        if bad:
            raise ConfigError(f"eval.methods: unknown method(s) {bad}; expected {tuple(ABLATION_METHODS)}")
        bad = [k for k in self.shift_kinds if k not in SHIFT_KINDS]
        if bad:
            raise ConfigError(f"eval.shift_kinds: unknown kind(s) {bad}")
        if any(s not in range(6) for s in self.severities):
            raise ConfigError("eval.severities entries must be integers in 0..5")
        if self.sweep_axis not in SWEEP_AXES:
            raise ConfigError(f"eval.sweep_axis must be one of {SWEEP_AXES}")
        if not self.seeds:
            raise ConfigError("eval.seeds must not be empty")


@dataclass(frozen=True)
class RunConfig:
    world: WorldSpec = field(default_factory=WorldSpec)
    shift: ShiftSpec = field(default_factory=ShiftSpec)
    bank: BankConfig = field(default_factory=BankConfig)
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    version: int = SCHEMA_VERSION

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"


SECTIONS = {"world": WorldSpec, "shift": ShiftSpec, "bank": BankConfig, "adapt": AdaptConfig, "eval": EvalConfig}


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _coerce(path: str, value, default):
    """Check a JSON value against the type of the field's default."""
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, tuple) or default is None:
        ok = value is None or isinstance(value, (list, tuple))
        value = None if value is None else tuple(value)
    else:
        ok = True
    if not ok:
        raise ConfigError(f"{path}: expected {type(default).__name__}, got {json.dumps(value)}")
    return value


def _build_section(name: str, data) -> object:
    cls = SECTIONS[name]
    if not isinstance(data, dict):
        raise ConfigError(f"{name}: section must be a JSON object")
    defaults = cls()
    known = {f.name for f in fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in known:
            raise ConfigError(f"{name}.{key}: unknown key")
        kwargs[key] = _coerce(f"{name}.{key}", value, getattr(defaults, key))
    try:
        return replace(defaults, **kwargs)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"{name}: {exc}") from None


def from_dict(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    for key in data:
        if key not in SECTIONS and key != "version":
            raise ConfigError(f"{key}: unknown key")
    version = data.get("version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"version: unsupported schema version {version!r} (expected {SCHEMA_VERSION})")
    parts = {name: _build_section(name, data.get(name, {})) for name in SECTIONS}
    return RunConfig(**parts, version=version)


def load_config(path) -> RunConfig:
    text = Path(path).read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return from_dict(data)


def apply_overrides(cfg: RunConfig, assignments) -> RunConfig:
    """Apply ``section.key=value`` strings; values parse as JSON, else as strings."""
    data = cfg.to_dict()
    for item in assignments:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        path, raw = item.split("=", 1)
        parts = path.split(".")
        if len(parts) != 2 or parts[0] not in SECTIONS:
            raise ConfigError(f"{path}: unknown key")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        data[parts[0]][parts[1]] = value
    return from_dict(data)
