"""Flat ``section.key=value`` run configuration.

Example::

    data.classes=8
    data.imbalance=100
    stage1.lambda1=10
    stage1.strong.mask_prob=0.15
    stage2.iterations=5
    run.seeds=1,2,3,4,5

Unknown keys are errors.  ``#`` starts a comment.
"""

from __future__ import annotations

import hashlib
import typing
from dataclasses import dataclass, field, fields, replace
from typing import Dict, FrozenSet, List, Optional, Tuple

from ..datagen import LongTailSpec, PerturbConfig
from ..icc import IccConfig
from ..rrl import Stage1Config

ABLATIONS = ("no_rrl", "no_icc", "no_vfc", "no_fdc")
BASELINES = ("ce", "rs", "decoupling")
VARIANTS = ("full",) + ABLATIONS + BASELINES


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    path: Optional[str] = None
    classes: int = 8
    n0: int = 1000
    imbalance: float = 100.0
    dim: int = 8
    noise_dims: int = 4
    sep: float = 4.0
    sigma: float = 1.0
    split: Tuple[float, float, float] = (0.7, 0.1, 0.2)
    groups_file: Optional[str] = None

    def spec(self, seed: int) -> LongTailSpec:
        return LongTailSpec(self.classes, self.n0, self.imbalance, self.dim, self.sep,
                            self.noise_dims, seed, self.sigma)


@dataclass(frozen=True)
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    stage1: Stage1Config = field(default_factory=Stage1Config)
    stage2: IccConfig = field(default_factory=IccConfig)
    ablations: FrozenSet[str] = frozenset()
    baseline: Optional[str] = None
    seeds: Tuple[int, ...] = (1, 2, 3, 4, 5)
    out: str = "runs"

    def __post_init__(self):
        unknown = set(self.ablations) - set(ABLATIONS)
        if unknown:
            raise ConfigError(f"unknown ablations {sorted(unknown)}")
        if self.baseline is not None and self.baseline not in BASELINES:
            raise ConfigError(f"unknown baseline {self.baseline!r}")
        if self.baseline is not None and self.ablations:
            raise ConfigError("ablations and baseline are mutually exclusive")
        if not self.seeds:
            raise ConfigError("at least one seed is required")

    @property
    def variant(self) -> str:
        if self.baseline:
            return self.baseline
        if not self.ablations:
            return "full"
        return "+".join(sorted(self.ablations))

    def for_variant(self, name: str) -> "RunConfig":
        if name not in VARIANTS:
            raise ConfigError(f"unknown variant {name!r}")
        if name == "full":
            return replace(self, ablations=frozenset(), baseline=None)
        if name in ABLATIONS:
            return replace(self, ablations=frozenset({name}), baseline=None)
        return replace(self, ablations=frozenset(), baseline=name)


# typed (de)serialisation -----------------------------------------------------------

_SECTIONS = {"data": DataConfig, "stage1": Stage1Config, "stage2": IccConfig}
_NESTED = {"strong": "perturb_strong", "weak": "perturb_weak"}


def _resolve(tp):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union and type(None) in args:
        return _resolve(next(a for a in args if a is not type(None)))[0], True
    return tp, False


def _parse_value(raw: str, tp, key: str):
    base, optional = _resolve(tp)
    text = raw.strip()
    if optional and text.lower() in ("none", "null", ""):
        return None
    try:
        if base is bool:
            if text.lower() in ("true", "1", "yes"):
                return True
            if text.lower() in ("false", "0", "no"):
                return False
            raise ValueError(text)
        if base is int:
            return int(text.replace("_", ""))
        if base is float:
            return float(text)
        if base is str:
            return text
        if typing.get_origin(base) in (tuple, Tuple):
            return tuple(float(v) for v in text.split(","))
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {base}") from exc
    raise ConfigError(f"{key}: unsupported type {tp}")


def _format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (tuple, list, frozenset, set)):
        items = sorted(value) if isinstance(value, (frozenset, set)) else value
        return ",".join(_format_value(v) for v in items)
    return str(value)


def _field_types(cls) -> Dict[str, object]:
    return typing.get_type_hints(cls)


def _skip(section: str, name: str) -> bool:
    # seeds are set per run; ``stage1.seed``/``stage2.seed`` would only mislead
    return name == "seed" and section in ("stage1", "stage2")


def to_items(cfg: RunConfig) -> Dict[str, str]:
    """Canonical flat view of every effective setting."""
    items: Dict[str, str] = {}
    for section, cls in _SECTIONS.items():
        obj = getattr(cfg, section)
        for f in fields(cls):
            if _skip(section, f.name):
                continue
            value = getattr(obj, f.name)
            if isinstance(value, PerturbConfig):
                prefix = next(k for k, v in _NESTED.items() if v == f.name)
                for pf in fields(PerturbConfig):
                    if pf.name in ("seed", "mode"):
                        continue
                    items[f"{section}.{prefix}.{pf.name}"] = _format_value(getattr(value, pf.name))
                continue
            items[f"{section}.{f.name}"] = _format_value(value)
    items["run.ablations"] = _format_value(cfg.ablations)
    items["run.baseline"] = _format_value(cfg.baseline)
    items["run.seeds"] = _format_value(cfg.seeds)
    items["run.out"] = cfg.out
    return items


def config_hash(cfg: RunConfig, exclude=("run.seeds", "run.out")) -> str:
    items = to_items(cfg)
    text = "\n".join(f"{k}={v}" for k, v in sorted(items.items()) if k not in exclude)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def dumps(cfg: RunConfig) -> str:
    return "".join(f"{k}={v}\n" for k, v in sorted(to_items(cfg).items()))


def apply_overrides(cfg: RunConfig, pairs: Dict[str, str]) -> RunConfig:
    """Return ``cfg`` with ``key=value`` overrides applied (validated)."""
    sections = {name: {} for name in _SECTIONS}
    perturb = {"strong": {}, "weak": {}}
    run = {}
    for key, raw in pairs.items():
        parts = key.split(".")
        if parts[0] == "run" and len(parts) == 2:
            run[parts[1]] = raw
            continue
        if parts[0] in _SECTIONS and len(parts) == 2:
            types = _field_types(_SECTIONS[parts[0]])
            if parts[1] not in types or _skip(parts[0], parts[1]) or parts[1] in _NESTED.values():
                raise ConfigError(f"unknown config key {key!r}")
            sections[parts[0]][parts[1]] = _parse_value(raw, types[parts[1]], key)
            continue
        if parts[0] == "stage1" and len(parts) == 3 and parts[1] in _NESTED:
            types = _field_types(PerturbConfig)
            if parts[2] not in types or parts[2] in ("seed", "mode"):
                raise ConfigError(f"unknown config key {key!r}")
            perturb[parts[1]][parts[2]] = _parse_value(raw, types[parts[2]], key)
            continue
        raise ConfigError(f"unknown config key {key!r}")
    try:
        s1 = dict(sections["stage1"])
        for name, attr in _NESTED.items():
            if perturb[name]:
                s1[attr] = replace(getattr(cfg.stage1, attr), **perturb[name])
        new = {
            "data": replace(cfg.data, **sections["data"]),
            "stage1": replace(cfg.stage1, **s1),
            "stage2": replace(cfg.stage2, **sections["stage2"]),
        }
        for key, raw in run.items():
            if key == "seeds":
                new["seeds"] = tuple(int(v) for v in raw.split(",") if v.strip())
            elif key == "ablations":
                new["ablations"] = frozenset(v.strip() for v in raw.split(",") if v.strip())
            elif key == "baseline":
                new["baseline"] = None if raw.strip().lower() in ("", "none") else raw.strip()
            elif key == "out":
                new["out"] = raw.strip()
            else:
                raise ConfigError(f"unknown config key 'run.{key}'")
        return replace(cfg, **new)
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc


def parse_text(text: str, base: Optional[RunConfig] = None) -> RunConfig:
    pairs: Dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value")
        key, value = line.split("=", 1)
        key = key.strip()
        if key in pairs:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        pairs[key] = value.strip()
    return apply_overrides(base or RunConfig(), pairs)


def load_config(path: str, base: Optional[RunConfig] = None) -> RunConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path!r}: {exc}") from exc
    return parse_text(text, base)


def desk_config() -> RunConfig:
    """The shipped desk-scale configuration."""
    from importlib.resources import files

    return parse_text(files("lmd").joinpath("configs/desk.conf").read_text())


def differing_keys(a: RunConfig, b: RunConfig) -> List[str]:
    ia, ib = to_items(a), to_items(b)
    return sorted(k for k in ia if ia[k] != ib.get(k))


__all__ = [
    "ABLATIONS", "BASELINES", "VARIANTS", "ConfigError", "DataConfig", "RunConfig",
    "apply_overrides", "config_hash", "desk_config", "differing_keys", "dumps", "load_config",
    "parse_text", "to_items",
]
