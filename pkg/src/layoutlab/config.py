"""Experiment configuration: YAML file -> dataclasses, with line-numbered errors.

Precedence (lowest to highest): built-in defaults, ``preset`` named in the
file, values in the file, command-line flags.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .presets import PRESETS


class ConfigError(ValueError):
    pass


@dataclass
class GridSpec:
    dims: tuple[int, int, int] = (64, 64, 64)
    block_shape: tuple[int, int, int] = (8, 8, 8)
    element_size: int = 8


@dataclass
class AssignmentSpec:
    ranks: int = 8
    ranks_per_node: int = 2
    seed: int = 0
    exchanges: int = 0
    locality_scale: float | None = None


@dataclass
class DeviceSpec:
    seek_s: float = 1e-3
    bandwidth_Bps: float = float(1 << 30)
    open_s: float = 1e-2


@dataclass
class CostSpec:
    timing_table: str | None = None  # None: built-in staging measurements
    t_c: str = "40"
    n: int = 256
    p: int = 6
    m: int = 2
    q: int = 32
    S: str = "256"
    N: int = 26
    interpolate: bool = False


@dataclass
class SimSpec:
    buffer_depth: int = 1
    events: bool = False


@dataclass
class ExperimentConfig:
    grid: GridSpec = field(default_factory=GridSpec)
    assignment: AssignmentSpec = field(default_factory=AssignmentSpec)
    strategy: str = "Chunked"
    strategies: list[str] = field(default_factory=lambda: ["Contiguous", "Chunked", "Subfiled-FPP", "Subfiled-FPN"])
    merge: str = "none"
    patterns: list[dict] | str = "default"
    readers: list[int] = field(default_factory=lambda: [1, 2, 4, 8])
    oracle: bool = True
    materialize: bool = True  # gen: write payloads, not only the assignment report
    device: DeviceSpec = field(default_factory=DeviceSpec)
    cost: CostSpec = field(default_factory=CostSpec)
    sim: SimSpec = field(default_factory=SimSpec)
    out: str = "runs/default"


_SECTIONS = {"grid": GridSpec, "assignment": AssignmentSpec, "device": DeviceSpec, "cost": CostSpec, "sim": SimSpec}
_STRATEGIES = {"contiguous", "chunked", "subfiled-fpp", "subfiled-fpn"}
_MERGES = {"none", "intraprocess", "intranode"}


def _lines(node, prefix="") -> dict[str, int]:
    """Map dotted key paths to 1-based line numbers of a composed YAML tree."""
    out = {}
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            path = f"{prefix}{k.value}"
            out[path] = k.start_mark.line + 1
            out.update(_lines(v, path + "."))
    return out


def _deep_update(base: dict, upd: dict) -> dict:
    for k, v in upd.items():
        if isinstance(v, dict) and isinstance(base.get(k), dict):
            _deep_update(base[k], v)
        else:
            base[k] = v
    return base


def _coerce(value: Any, default: Any, where: str):
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)) or len(value) != len(default):
            raise ConfigError(f"{where}: expected a list of {len(default)} integers, got {value!r}")
        try:
            return tuple(int(v) for v in value)
        except (TypeError, ValueError):
            raise ConfigError(f"{where}: expected integers, got {value!r}") from None
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(value, bool):
        if not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if not isinstance(value, (int, float)) or isinstance(value, bool):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    return value


def from_dict(raw: dict, lines: dict[str, int] | None = None, source: str = "<config>") -> ExperimentConfig:
    lines = lines or {}

    def where(path):
        ln = lines.get(path)
        return f"{source}:{ln}: {path}" if ln else f"{source}: {path}"

    raw = copy.deepcopy(raw)
    preset = raw.pop("preset", None)
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"{where('preset')}: unknown preset {preset!r} (have {sorted(PRESETS)})")
        raw = _deep_update(copy.deepcopy(PRESETS[preset]), raw)

    cfg = ExperimentConfig()
    for key, value in raw.items():
        if key in _SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(f"{where(key)}: expected a mapping")
            section = getattr(cfg, key)
            for k, v in value.items():
                if not hasattr(section, k):
                    raise ConfigError(f"{where(f'{key}.{k}')}: unknown key")
                if v is None:
                    setattr(section, k, None)
                    continue
                default = getattr(section, k)
                if default is None or k in ("t_c", "S"):
                    setattr(section, k, str(v) if k in ("t_c", "S") else v)
                else:
                    setattr(section, k, _coerce(v, default, where(f"{key}.{k}")))
        elif hasattr(cfg, key):
            setattr(cfg, key, value)
        else:
            raise ConfigError(f"{where(key)}: unknown key")

    g = cfg.grid
    bad_axes = [i for i in range(3) if g.block_shape[i] <= 0 or g.dims[i] % g.block_shape[i]]
    if bad_axes:
        raise ConfigError(f"{where('grid.dims')}: NonDivisible: dims {g.dims} not divisible by "
                          f"block_shape {g.block_shape} along axes {bad_axes}")
    if str(cfg.strategy).lower() not in _STRATEGIES:
        raise ConfigError(f"{where('strategy')}: unknown strategy {cfg.strategy!r}")
    bad = [s for s in cfg.strategies if str(s).lower() not in _STRATEGIES]
    if bad:
        raise ConfigError(f"{where('strategies')}: unknown strategies {bad}")
    if str(cfg.merge).lower() not in _MERGES:
        raise ConfigError(f"{where('merge')}: expected none, IntraProcess or IntraNode, got {cfg.merge!r}")
    if not isinstance(cfg.readers, list) or not all(isinstance(r, int) and r >= 1 for r in cfg.readers):
        raise ConfigError(f"{where('readers')}: expected a list of positive integers")
    if cfg.assignment.ranks < 1 or cfg.assignment.ranks_per_node < 1:
        raise ConfigError(f"{where('assignment')}: ranks and ranks_per_node must be >= 1")
    if cfg.patterns != "default" and not isinstance(cfg.patterns, list):
        raise ConfigError(f"{where('patterns')}: expected 'default' or a list of pattern mappings")
    return cfg


def read_yaml(path: str | Path) -> tuple[dict, dict[str, int], str]:
    """Parse a config file into (raw tree, key -> line number, source name)."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"{path}: config file not found")
    text = path.read_text()
    try:
        node = yaml.compose(text)
        raw = yaml.safe_load(text) or {}
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: {e}") from e
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return raw, _lines(node), str(path)


def load_config(path: str | Path | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    return from_dict(*read_yaml(path))
