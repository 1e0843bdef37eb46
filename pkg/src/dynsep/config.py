"""Run configuration: INI files with ``[model]``, ``[train]`` and ``[data]`` sections.

Overrides use dotted keys (``model.max_width=2``). Unknown sections or keys
raise :class:`ConfigError` naming the offending key.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .model import ModelConfig
from .training import DataSpec, TrainConfig

SECTIONS = {"model": ModelConfig, "train": TrainConfig, "data": DataSpec}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataSpec = field(default_factory=DataSpec)

    def items(self):
        """``(dotted_key, value)`` pairs in a stable order."""
        for section in SECTIONS:
            obj = getattr(self, section)
            for f in dataclasses.fields(obj):
                yield f"{section}.{f.name}", getattr(obj, f.name)

    def snapshot(self) -> str:
        lines, current = [], None
        for key, value in self.items():
            section, name = key.split(".", 1)
            if section != current:
                if current is not None:
                    lines.append("")
                lines.append(f"[{section}]")
                current = section
            lines.append(f"{name} = {format_value(value)}")
        return "\n".join(lines) + "\n"


def format_value(v) -> str:
    if isinstance(v, tuple):
        return ",".join(format_value(x) for x in v)
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _parse(key: str, raw: str, default):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(_parse(key, x, d) for x, d in zip(raw.split(","), default, strict=True))
    except ValueError as e:
        raise ConfigError(f"bad value for {key}: {raw!r}") from e
    return raw


def _field_defaults(cls) -> dict:
    out = {}
    for f in dataclasses.fields(cls):
        out[f.name] = f.default if f.default is not dataclasses.MISSING else f.default_factory()
    return out


def apply_values(run: RunConfig, values: dict[str, str]) -> RunConfig:
    """New config with dotted-key string values applied."""
    by_section: dict[str, dict] = {s: {} for s in SECTIONS}
    for key, raw in values.items():
        section, _, name = key.partition(".")
        if section not in SECTIONS or not name:
            raise ConfigError(f"unknown config key: {key}")
        current = getattr(run, section)
        names = {f.name for f in dataclasses.fields(current)}
        if name not in names:
            raise ConfigError(f"unknown config key: {key}")
        by_section[section][name] = _parse(key, raw, getattr(current, name))
    try:
        return RunConfig(**{s: dataclasses.replace(getattr(run, s), **kw) for s, kw in by_section.items()})
    except (ValueError, TypeError) as e:
        raise ConfigError(str(e)) from e


def parse_overrides(pairs: list[str]) -> dict[str, str]:
    out = {}
    for p in pairs:
        key, sep, value = p.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"override must look like section.key=value, got {p!r}")
        out[key.strip()] = value
    return out


def read_ini(path: str | Path) -> dict[str, str]:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str  # keep key case
    try:
        with open(path) as f:
            cp.read_file(f)
    except (OSError, configparser.Error) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    return {f"{s}.{k}": v for s in cp.sections() for k, v in cp.items(s)}


def preset_path(name: str) -> Path:
    return Path(str(resources.files("dynsep") / "presets" / f"{name}.ini"))


def load_config(path: str | Path | None = None, overrides: list[str] = ()) -> RunConfig:
    """Defaults, then the file (a path or a preset name such as ``desk``), then overrides."""
    values: dict[str, str] = {}
    if path is not None:
        p = Path(path)
        if not p.exists() and preset_path(str(path)).exists():
            p = preset_path(str(path))
        values.update(read_ini(p))
    values.update(parse_overrides(list(overrides)))
    return apply_values(RunConfig(), values)
