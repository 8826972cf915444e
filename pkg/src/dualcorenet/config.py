"""INI run configuration: ``[network]``, ``[crf]``, ``[training]``, ``[data]``, ``[run]``.

Every key defaults to the value of the matching dataclass field.  Values are
coerced to the field's type before any work starts, and every unknown or
malformed key is reported in a single :class:`ConfigError`.

Lists are comma separated (``lpl_widths = 8, 16, 46``); the 2x2 CRF
compatibility matrix separates rows with ``;`` (``compatibility = 0 1; 1 0``).
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .crf import CrfConfig
from .data import DataConfig
from .errors import ConfigError
from .model import PRESETS, NetworkConfig, network_config
from .training import TrainConfig

PRECISIONS = ("f32", "f64")


@dataclass
class RunConfig:
    seed: int = 0
    precision: str = "f32"


@dataclass
class Config:
    network: NetworkConfig = field(default_factory=network_config)
    crf: CrfConfig = field(default_factory=CrfConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    run: RunConfig = field(default_factory=RunConfig)


SECTIONS = {"network": NetworkConfig, "crf": CrfConfig, "training": TrainConfig,
            "data": DataConfig, "run": RunConfig}
# The training seed follows [run] seed so a single flag drives every stream.
_HIDDEN = {"training": {"seed"}}


def _keys(section: str) -> dict[str, dataclasses.Field]:
    hidden = _HIDDEN.get(section, set())
    return {f.name: f for f in dataclasses.fields(SECTIONS[section]) if f.name not in hidden}


def _default(f: dataclasses.Field):
    if f.default is not dataclasses.MISSING:
        return f.default
    return f.default_factory()  # type: ignore[misc]


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def coerce(text: str, example):
    """Parse ``text`` into the type of ``example`` (a field default)."""
    if isinstance(example, bool):
        return _parse_bool(text)
    if isinstance(example, int):
        return int(text)
    if isinstance(example, float):
        return float(text)
    if isinstance(example, tuple):
        if example and isinstance(example[0], tuple):
            rows = [r for r in text.split(";") if r.strip()]
            return tuple(tuple(float(v) for v in r.replace(",", " ").split()) for r in rows)
        kind = type(example[0]) if example else int
        return tuple(kind(v) for v in text.replace(",", " ").split())
    return text.strip()


def format_value(value) -> str:
    if isinstance(value, tuple):
        if value and isinstance(value[0], tuple):
            return "; ".join(" ".join(repr(float(v)) for v in row) for row in value)
        return ", ".join(str(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def parse_config(text: str = "", overrides: dict | None = None) -> Config:
    """Resolve INI ``text`` plus ``{section: {key: value}}`` overrides to a :class:`Config`."""
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";;"),
                                       comment_prefixes=("#",))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None

    raw: dict[str, dict[str, str]] = {s: dict(parser.items(s)) for s in parser.sections()}
    for section, values in (overrides or {}).items():
        raw.setdefault(section, {}).update({k: v if isinstance(v, str) else format_value(v)
                                            for k, v in values.items()})

    problems: list[str] = []
    for section in raw:
        if section not in SECTIONS:
            problems.append(f"[{section}]: unknown section (expected one of {', '.join(SECTIONS)})")

    typed: dict[str, dict] = {}
    net_raw = raw.get("network", {})
    preset = net_raw.get("preset", "desk").strip()
    if preset not in PRESETS:
        problems.append(f"[network] preset: unknown preset {preset!r} (choose from {', '.join(sorted(PRESETS))})")
        preset = "desk"
    for section in SECTIONS:
        fields = _keys(section)
        typed[section] = {}
        base = PRESETS[preset] if section == "network" else {}
        for key, text_value in raw.get(section, {}).items():
            if key not in fields:
                problems.append(f"[{section}] {key}: unknown key")
                continue
            if section == "network" and key == "preset":
                continue
            example = base.get(key, _default(fields[key]))
            try:
                typed[section][key] = coerce(text_value, example)
            except (TypeError, ValueError) as exc:
                problems.append(f"[{section}] {key}: cannot parse {text_value!r} ({exc})")

    run = typed["run"]
    if "precision" in run and run["precision"] not in PRECISIONS:
        problems.append(f"[run] precision: must be one of {', '.join(PRECISIONS)}, got {run['precision']!r}")

    built = {}
    if not problems:
        for section, cls in SECTIONS.items():
            try:
                if section == "network":
                    built[section] = network_config(preset, **typed[section])
                elif section == "training":
                    built[section] = cls(seed=typed["run"].get("seed", 0), **typed[section])
                else:
                    built[section] = cls(**typed[section])
            except (ConfigError, TypeError, ValueError) as exc:
                problems.append(f"[{section}]: {exc}")
    if problems:
        raise ConfigError("invalid configuration:\n  " + "\n  ".join(problems))
    return Config(**built)


def load_config(path=None, overrides: dict | None = None) -> Config:
    """Read ``path`` (defaults only when ``None``); a missing file is a config error."""
    text = ""
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        text = p.read_text()
    return parse_config(text, overrides)


def config_text(cfg: Config) -> str:
    """Fully resolved INI text; ``parse_config(config_text(c))`` reproduces ``c``."""
    lines = []
    for section in SECTIONS:
        obj = getattr(cfg, section)
        lines.append(f"[{section}]")
        for name in _keys(section):
            lines.append(f"{name} = {format_value(getattr(obj, name))}")
        lines.append("")
    return "\n".join(lines)
