"""Run configuration files.

A config is YAML with optional sections::

    train:     TrainConfig fields
    source:    DomainSpec fields of the labeled domain
    target:    DomainSpec fields of the unlabeled domain
    benchmark: eval_fraction, source_heldout_per_id
    run:       checkpoint_every
    ablate:    seeds, grid (field -> list of values)

Missing sections fall back to the desk defaults. Errors carry the line of the
offending key. A run manifest (which stores the sections under ``config``) is
accepted too, so a manifest alone reproduces its run.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

import yaml

from .errors import ConfigError, InvalidSpec
from .synthetic import DomainSpec, default_specs
from .training import TrainConfig, desk_config

DEFAULT_GRID = {
    "lambda_go": [0.0, 0.01, 0.1, 1.0, 5.0],
    "lambda_lo": [0.0, 0.1, 1.0, 5.0],
    "lambda_dim": [0.0, 0.01, 0.05, 0.5],
    "alpha": [0.3, 0.4, 0.5, 0.6, 0.7, 0.8],
    "beta": [0.03, 0.05, 0.1],
    "lo_mask_siblings": [True, False],
}


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=desk_config)
    source: DomainSpec = field(default_factory=lambda: default_specs()[0])
    target: DomainSpec = field(default_factory=lambda: default_specs()[1])
    eval_fraction: float = 0.5
    source_heldout_per_id: int = 4
    checkpoint_every: int = 10
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    grid: dict = field(default_factory=lambda: {k: list(v) for k, v in DEFAULT_GRID.items()})

    def to_dict(self) -> dict:
        return {
            "train": self.train.to_dict(),
            "source": self.source.to_dict(),
            "target": self.target.to_dict(),
            "benchmark": {"eval_fraction": self.eval_fraction, "source_heldout_per_id": self.source_heldout_per_id},
            "run": {"checkpoint_every": self.checkpoint_every},
            "ablate": {"seeds": list(self.seeds), "grid": {k: list(v) for k, v in self.grid.items()}},
        }


SECTIONS = ("train", "source", "target", "benchmark", "run", "ablate")


def _key_lines(node, prefix=()) -> dict:
    """Map every mapping-key path in a composed YAML tree to its 1-based line."""
    out = {}
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            path = prefix + (k.value,)
            out[path] = k.start_mark.line + 1
            out.update(_key_lines(v, path))
    return out


def _fail(msg, lines, path, source):
    line = lines.get(tuple(path))
    where = f"{source}:{line}" if line else source
    raise ConfigError(f"{where}: {msg}")


def _coerce(value, default, name):
    """Check a value against the type of the field's default."""
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise TypeError(f"{name} must be true or false")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise TypeError(f"{name} must be an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise TypeError(f"{name} must be a number")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise TypeError(f"{name} must be a string")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, list):
            raise TypeError(f"{name} must be a list")
        return tuple(value)
    return value


def _build(cls, base, data, lines, section, source):
    if data is None:
        return base
    if not isinstance(data, dict):
        _fail(f"section {section!r} must be a mapping", lines, [section], source)
    known = {f.name for f in fields(cls)}
    values = {}
    for key, value in data.items():
        if key not in known:
            _fail(f"unknown {section} option {key!r}", lines, [section, key], source)
        try:
            values[key] = _coerce(value, getattr(base, key), key)
        except TypeError as exc:
            _fail(str(exc), lines, [section, key], source)
    try:
        obj = replace(base, **values)
        if hasattr(obj, "validate"):
            obj.validate()
    except (ConfigError, InvalidSpec, ValueError) as exc:
        _fail(str(exc), lines, [section], source)
    return obj


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    try:
        tree = yaml.compose(text)
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"{source}:{mark.line + 1}" if mark else source
        raise ConfigError(f"{where}: {getattr(exc, 'problem', None) or exc}") from None
    lines = _key_lines(tree) if tree is not None else {}
    data = data or {}
    if not isinstance(data, dict):
        raise ConfigError(f"{source}: top level must be a mapping")
    if "config" in data and "code_version" in data:
        lines = {k[1:]: v for k, v in lines.items() if k[:1] == ("config",)}
        data = data["config"]
    for key in data:
        if key not in SECTIONS:
            _fail(f"unknown section {key!r}", lines, [key], source)

    default = RunConfig()
    cfg = RunConfig(
        train=_build(TrainConfig, default.train, data.get("train"), lines, "train", source),
        source=_build(DomainSpec, default.source, data.get("source"), lines, "source", source),
        target=_build(DomainSpec, default.target, data.get("target"), lines, "target", source),
    )
    bench = data.get("benchmark") or {}
    for key, value in bench.items():
        if key == "eval_fraction" and isinstance(value, (int, float)) and 0 < value < 1:
            cfg.eval_fraction = float(value)
        elif key == "source_heldout_per_id" and isinstance(value, int) and value >= 1:
            cfg.source_heldout_per_id = value
        else:
            _fail(f"invalid benchmark option {key}={value!r}", lines, ["benchmark", key], source)
    for key, value in (data.get("run") or {}).items():
        if key == "checkpoint_every" and isinstance(value, int) and not isinstance(value, bool) and value >= 0:
            cfg.checkpoint_every = value
        else:
            _fail(f"invalid run option {key}={value!r}", lines, ["run", key], source)
    ablate = data.get("ablate") or {}
    for key, value in ablate.items():
        if key == "seeds":
            if not isinstance(value, list) or not value or not all(isinstance(s, int) for s in value):
                _fail("ablate seeds must be a nonempty list of integers", lines, ["ablate", key], source)
            cfg.seeds = value
        elif key == "grid":
            if not isinstance(value, dict):
                _fail("ablate grid must be a mapping", lines, ["ablate", key], source)
            known = {f.name for f in fields(TrainConfig)}
            for name, vals in value.items():
                if name not in known or not isinstance(vals, list) or not vals:
                    _fail(f"grid entry {name!r} must name a train option and list its values",
                          lines, ["ablate", "grid", name], source)
                for v in vals:
                    try:
                        _build(TrainConfig, cfg.train, {name: v}, lines, "train", source)
                    except ConfigError:
                        _fail(f"grid value {v!r} invalid for {name}", lines, ["ablate", "grid", name], source)
            cfg.grid = value
        else:
            _fail(f"unknown ablate option {key!r}", lines, ["ablate", key], source)
    return cfg


def load_config(path=None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, str(path))
