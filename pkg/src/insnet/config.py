"""Line-oriented ``key=value`` run configuration with dotted sections."""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable

from .decoding import DecodeControls
from .model import ConfigError, InsNetConfig
from .training import TrainConfig


@dataclass
class DataConfig:
    task: str = "stories"  # stories | captions | random
    train_count: int = 2000
    dev_count: int = 200
    seed: int = 0
    length: int = 20
    vocab_size: int = 256
    noise: float = 0.05


@dataclass
class BenchConfig:
    n_sequences: int = 16
    batch_size: int = 8
    epochs: int = 3
    warmup_epochs: int = 1
    min_epoch_seconds: float = 0.05
    vocab_size: int = 256
    seed: int = 0


SECTIONS = {
    "model": InsNetConfig,
    "train": TrainConfig,
    "decode": DecodeControls,
    "data": DataConfig,
    "bench": BenchConfig,
}
# aliases onto real fields
ALIASES = {
    "order.strategy": "train.order_strategy",
    "decode.temperature": ("decode.position_temperature", "decode.token_temperature"),
}


def _coerce(cls, name: str, raw: str):
    f = next((f for f in fields(cls) if f.name == name), None)
    if f is None:
        raise ConfigError(f"unknown key {cls.__name__.lower()}.{name}")
    default = f.default
    if isinstance(default, bool):
        if raw.lower() not in ("true", "false", "1", "0"):
            raise ConfigError(f"{name}: expected a boolean, got {raw!r}")
        return raw.lower() in ("true", "1")
    if default is None:  # optional float (theta_term)
        return None if raw.lower() in ("", "none") else float(raw)
    try:
        return type(default)(raw)
    except ValueError as exc:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {type(default).__name__}") from exc


@dataclass
class RunConfig:
    command: str
    config_path: str | None = None
    overrides: list[str] = field(default_factory=list)
    out_dir: str | None = None
    values: dict[str, str] = field(default_factory=dict)

    @classmethod
    def load(cls, command: str, config_path=None, overrides: Iterable[str] = (), out_dir=None) -> "RunConfig":
        rc = cls(command, str(config_path) if config_path else None, list(overrides), out_dir)
        lines: list[tuple[str, str]] = []
        if config_path:
            for lineno, line in enumerate(Path(config_path).read_text(encoding="utf-8").splitlines(), 1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                lines.append((line, f"{config_path}:{lineno}"))
        lines.extend((o, "--set") for o in rc.overrides)
        for line, where in lines:
            key, sep, value = line.partition("=")
            if not sep:
                raise ConfigError(f"{where}: expected key=value, got {line!r}")
            rc.set(key.strip(), value.strip())
        return rc

    def set(self, key: str, value: str) -> None:
        targets = ALIASES.get(key, key)
        for t in (targets,) if isinstance(targets, str) else targets:
            section, _, name = t.partition(".")
            if section not in SECTIONS or not name:
                raise ConfigError(f"unknown key {key!r}")
            _coerce(SECTIONS[section], name, value)  # validate early
            self.values[t] = value

    def section(self, name: str, base=None, **defaults):
        """Instantiate a section's dataclass: ``base`` < ``defaults`` < file/overrides."""
        cls = SECTIONS[name]
        obj = base if base is not None else cls()
        kwargs = dict(defaults)
        for key, raw in self.values.items():
            sec, _, fname = key.partition(".")
            if sec == name:
                kwargs[fname] = _coerce(cls, fname, raw)
        return replace(obj, **kwargs) if kwargs else obj

    def resolved(self, **sections) -> str:
        """Deterministic echo of every effective value."""
        lines = [f"command={self.command}"]
        for name, obj in sorted(sections.items()):
            for f in fields(obj):
                lines.append(f"{name}.{f.name}={getattr(obj, f.name)}")
        return "\n".join(lines) + "\n"
