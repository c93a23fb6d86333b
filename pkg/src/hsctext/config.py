"""Run settings: every tunable default, read from ``section.key = value`` text files.

Later sources win: defaults, then each config file in order, then ``--set``
overrides from the command line. Unknown keys are errors so typos surface.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .classifiers import FernsConfig, LinearConfig, SCConfig
from .mce import MCEConfig
from .pipeline import DetectConfig, DictConfig
from .synth import SynthConfig


@dataclass
class WordConfig:
    lambda1: float = 1.0  # initial coefficients before MCE training
    lambda2: float = -1.0
    min_iou: float = 0.4  # ground-truth window to candidate match for MCE samples
    pairs_seed: int = 0  # negative geometric pairs


def geometric_linear() -> LinearConfig:
    return LinearConfig(C=1e4, tol=1e-3, max_epochs=5000)


@dataclass
class Settings:
    synth: SynthConfig = field(default_factory=SynthConfig)
    dictionary: DictConfig = field(default_factory=DictConfig)
    svm: LinearConfig = field(default_factory=LinearConfig)
    sc: SCConfig = field(default_factory=SCConfig)
    ferns: FernsConfig = field(default_factory=FernsConfig)
    geometric: LinearConfig = field(default_factory=geometric_linear)
    detect: DetectConfig = field(default_factory=DetectConfig)
    mce: MCEConfig = field(default_factory=MCEConfig)
    word: WordConfig = field(default_factory=WordConfig)


class ConfigError(ValueError):
    pass


def parse_lines(text: str, source: str = "<text>") -> list[tuple[str, str]]:
    """``key = value`` pairs in order; blank lines and ``#`` comments are ignored."""
    pairs = []
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected key = value, got {raw!r}")
        k, v = line.split("=", 1)
        pairs.append((k.strip(), v.strip()))
    return pairs


def _coerce(value: str, current, key: str, optional: bool = False):
    if optional and value.lower() in ("", "none"):
        return None
    try:
        if isinstance(current, bool):
            low = value.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(value)
            return low in ("true", "1", "yes")
        if isinstance(current, int):
            return int(value)
        if isinstance(current, float) or current is None:
            return float(value)
        if isinstance(current, list):
            return [p.strip() for p in value.split(",") if p.strip()]
        return value
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {value!r} as {type(current).__name__}") from None


def apply(settings: Settings, pairs) -> Settings:
    """Return a copy of ``settings`` with each ``section.key`` replaced."""
    sections = {f.name: getattr(settings, f.name) for f in dataclasses.fields(settings)}
    changes: dict[str, dict] = {}
    for key, value in pairs:
        sec, _, name = key.partition(".")
        if sec not in sections or not name:
            raise ConfigError(f"unknown setting {key!r}")
        obj = sections[sec]
        types = {f.name: str(f.type) for f in dataclasses.fields(obj)}
        if name not in types:
            raise ConfigError(f"unknown setting {key!r}")
        current = changes.get(sec, {}).get(name, getattr(obj, name))
        changes.setdefault(sec, {})[name] = _coerce(value, current, key, "None" in types[name])
    out = {}
    for sec, obj in sections.items():
        try:
            out[sec] = dataclasses.replace(obj, **changes.get(sec, {}))
        except ValueError as e:
            raise ConfigError(f"{sec}: {e}") from None
    return Settings(**out)


def load(paths=(), overrides=()) -> Settings:
    settings = Settings()
    for p in paths:
        p = Path(p)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        settings = apply(settings, parse_lines(p.read_text(encoding="utf-8"), str(p)))
    pairs = []
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must be key=value, got {item!r}")
        k, v = item.split("=", 1)
        pairs.append((k.strip(), v.strip()))
    return apply(settings, pairs)


def _fmt(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, list):
        return ",".join(v)
    return str(v)


def dump(settings: Settings) -> str:
    lines = []
    for f in dataclasses.fields(settings):
        obj = getattr(settings, f.name)
        for g in dataclasses.fields(obj):
            lines.append(f"{f.name}.{g.name} = {_fmt(getattr(obj, g.name))}")
    return "\n".join(lines) + "\n"
