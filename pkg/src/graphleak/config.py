"""Experiment configuration files.

A config is a JSON object with these sections (all optional):

    seed        int, or ``seeds`` for a list (grid)
    dataset     path to a dataset directory
    split       [train, val, test] fractions
    model       {arch, layers, hidden, activation}
    train       TrainConfig fields
    attack      AttackConfig fields plus ``knowledge`` and ``h_layers``
    defense     DefenseConfig fields plus ``kind`` (mcgpb, output_noise, dp_sgd, none),
                ``sigma`` and ``clip``
    audit       {variables, sampling}
    plane       {every}
    sbm         generate_sbm arguments
    grid        {command, params, search, n, seed}
    out         output directory

Unknown keys are rejected with their full key path.
"""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

from .attack import KNOWLEDGE, AttackConfig, AttackConfigError
from .defense import DefenseConfig, DefenseConfigError
from .gnn import TrainConfig


class ConfigError(ValueError):
    """Invalid configuration; ``path`` is the dotted key path of the offending entry."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


@dataclass
class ModelSection:
    arch: str = "gcn"
    layers: int = 2
    hidden: int = 16
    activation: str = "relu"


@dataclass
class AttackSection:
    knowledge: list[str] = field(default_factory=lambda: ["X", "Y"])
    h_layers: list[int] | None = None
    config: AttackConfig = field(default_factory=AttackConfig)


@dataclass
class DefenseSection:
    kind: str = "none"
    sigma: float = 0.0
    clip: float = 1.0
    config: DefenseConfig = field(default_factory=DefenseConfig)


@dataclass
class AuditSection:
    variables: list[str] = field(default_factory=lambda: ["X", "Y"])
    sampling: str = "auto"


@dataclass
class PlaneSection:
    every: int = 1


@dataclass
class SbmSection:
    n: int = 200
    blocks: int = 4
    p_in: float = 0.1
    p_out: float = 0.01
    d: int = 16
    noise: float = 1.0


@dataclass
class GridSection:
    command: str = "attack"
    params: dict[str, list] = field(default_factory=dict)
    search: str = "grid"
    n: int | None = None
    seed: int = 0


@dataclass
class ExperimentConfig:
    seed: int = 0
    seeds: list[int] | None = None
    dataset: str | None = None
    split: list[float] = field(default_factory=lambda: [0.1, 0.1, 0.8])
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    attack: AttackSection = field(default_factory=AttackSection)
    defense: DefenseSection = field(default_factory=DefenseSection)
    audit: AuditSection = field(default_factory=AuditSection)
    plane: PlaneSection = field(default_factory=PlaneSection)
    sbm: SbmSection = field(default_factory=SbmSection)
    grid: GridSection = field(default_factory=GridSection)
    out: str | None = None
    raw: dict = field(default_factory=dict, repr=False)

    def echo(self) -> dict:
        return copy.deepcopy(self.raw)


ARCHS = ("gcn", "gat", "sage")
DEFENSE_KINDS = ("none", "mcgpb", "output_noise", "dp_sgd")
COMMANDS = ("train", "attack", "audit")
TOP_LEVEL = ("seed", "seeds", "dataset", "split", "model", "train", "attack", "defense", "audit", "plane", "sbm", "grid", "out")


def _expect_obj(v, path: str) -> dict:
    if not isinstance(v, dict):
        raise ConfigError(path, f"expected an object, got {type(v).__name__}")
    return v


def _check_keys(d: dict, allowed, path: str) -> None:
    for k in d:
        if k not in allowed:
            raise ConfigError(f"{path}.{k}" if path else k, f"unknown key (allowed: {', '.join(sorted(allowed))})")


def _coerce(value, default, path: str):
    """Light type check against the default's type."""
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected a boolean, got {value!r}")
    elif isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
    elif isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)
    elif isinstance(default, str) and value is not None and not isinstance(value, str):
        raise ConfigError(path, f"expected a string, got {value!r}")
    elif isinstance(default, list) and not isinstance(value, list):
        raise ConfigError(path, f"expected a list, got {value!r}")
    return value


def _fill(cls, d: dict, path: str, skip=()):
    base = cls()
    names = [f.name for f in fields(cls) if f.name not in skip]
    _check_keys(d, names, path)
    kwargs = {}
    for k, v in d.items():
        kwargs[k] = _coerce(v, getattr(base, k), f"{path}.{k}")
    return kwargs


def _build(cls, d: dict, path: str, errors=(ValueError,)):
    kwargs = _fill(cls, d, path)
    try:
        return cls(**kwargs)
    except errors as e:
        raise ConfigError(path, str(e)) from e


def parse_config(data: dict) -> ExperimentConfig:
    data = _expect_obj(data, "")
    _check_keys(data, TOP_LEVEL, "")
    cfg = ExperimentConfig(raw=copy.deepcopy(data))
    if "seed" in data:
        cfg.seed = _coerce(data["seed"], 0, "seed")
        if cfg.seed < 0:
            raise ConfigError("seed", "must be nonnegative")
    if "seeds" in data:
        seeds = _coerce(data["seeds"], [], "seeds")
        if not seeds or not all(isinstance(s, int) and s >= 0 for s in seeds):
            raise ConfigError("seeds", "must be a nonempty list of nonnegative integers")
        cfg.seeds = seeds
    if "dataset" in data:
        cfg.dataset = _coerce(data["dataset"], "", "dataset")
    if "out" in data:
        cfg.out = _coerce(data["out"], "", "out")
    if "split" in data:
        split = _coerce(data["split"], [], "split")
        if len(split) != 3 or any(not isinstance(v, (int, float)) or v < 0 for v in split) or abs(sum(split) - 1) > 1e-9:
            raise ConfigError("split", "needs three nonnegative fractions summing to 1")
        cfg.split = [float(v) for v in split]

    if "model" in data:
        cfg.model = _build(ModelSection, _expect_obj(data["model"], "model"), "model")
    if cfg.model.arch not in ARCHS:
        raise ConfigError("model.arch", f"must be one of {ARCHS}")
    if cfg.model.layers < 1 or cfg.model.hidden < 1:
        raise ConfigError("model", "layers and hidden must be positive")

    if "train" in data:
        cfg.train = _build(TrainConfig, _expect_obj(data["train"], "train"), "train")
    if cfg.train.epochs < 0 or cfg.train.lr <= 0:
        raise ConfigError("train", "epochs must be nonnegative and lr positive")

    if "attack" in data:
        d = dict(_expect_obj(data["attack"], "attack"))
        sec = AttackSection()
        if "knowledge" in d:
            sec.knowledge = _coerce(d.pop("knowledge"), [], "attack.knowledge")
            for k in sec.knowledge:
                if k not in KNOWLEDGE:
                    raise ConfigError("attack.knowledge", f"unknown element {k!r}; expected a subset of {KNOWLEDGE}")
        if "h_layers" in d:
            sec.h_layers = d.pop("h_layers")
        sec.config = _build(AttackConfig, d, "attack", (AttackConfigError, ValueError))
        cfg.attack = sec

    if "defense" in data:
        d = dict(_expect_obj(data["defense"], "defense"))
        sec = DefenseSection()
        if "kind" in d:
            sec.kind = d.pop("kind")
            if sec.kind not in DEFENSE_KINDS:
                raise ConfigError("defense.kind", f"must be one of {DEFENSE_KINDS}")
        for k, default in (("sigma", 0.0), ("clip", 1.0)):
            if k in d:
                setattr(sec, k, _coerce(d.pop(k), default, f"defense.{k}"))
        if sec.sigma < 0:
            raise ConfigError("defense.sigma", "must be nonnegative")
        if not sec.clip > 0:
            raise ConfigError("defense.clip", "must be positive")
        sec.config = _build(DefenseConfig, d, "defense", (DefenseConfigError, ValueError))
        if d and sec.kind == "none":
            sec.kind = "mcgpb"
        cfg.defense = sec

    if "audit" in data:
        cfg.audit = _build(AuditSection, _expect_obj(data["audit"], "audit"), "audit")
    if "plane" in data:
        cfg.plane = _build(PlaneSection, _expect_obj(data["plane"], "plane"), "plane")
        if cfg.plane.every < 1:
            raise ConfigError("plane.every", "must be at least 1")
    if "sbm" in data:
        cfg.sbm = _build(SbmSection, _expect_obj(data["sbm"], "sbm"), "sbm")
    if "grid" in data:
        cfg.grid = _build(GridSection, _expect_obj(data["grid"], "grid"), "grid")
        if cfg.grid.command not in COMMANDS:
            raise ConfigError("grid.command", f"must be one of {COMMANDS}")
        if cfg.grid.search not in ("grid", "random"):
            raise ConfigError("grid.search", "must be 'grid' or 'random'")
        for key, values in cfg.grid.params.items():
            if not isinstance(values, list) or not values:
                raise ConfigError(f"grid.params.{key}", "needs a nonempty list of values")
    return cfg


def load_config(path: str | Path) -> ExperimentConfig:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError("", f"cannot read config {p}: {e.strerror}") from e
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError("", f"{p}: invalid JSON at line {e.lineno} column {e.colno}: {e.msg}") from e
    return parse_config(data)


def set_path(data: dict, dotted: str, value: Any) -> dict:
    """Return a copy of ``data`` with ``a.b.c`` set to ``value``."""
    out = copy.deepcopy(data)
    node = out
    keys = dotted.split(".")
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ConfigError(dotted, f"{k} is not an object")
    node[keys[-1]] = value
    return out


def defaults() -> dict:
    """Every field with its default, as a plain dict (for documentation)."""
    cfg = ExperimentConfig()
    out = {"seed": cfg.seed, "dataset": cfg.dataset, "split": cfg.split, "model": asdict(cfg.model), "train": asdict(cfg.train)}
    out["attack"] = {"knowledge": cfg.attack.knowledge, "h_layers": None, **asdict(cfg.attack.config)}
    out["defense"] = {"kind": cfg.defense.kind, "sigma": cfg.defense.sigma, "clip": cfg.defense.clip, **asdict(cfg.defense.config)}
    out["audit"] = asdict(cfg.audit)
    out["plane"] = asdict(cfg.plane)
    out["sbm"] = asdict(cfg.sbm)
    out["grid"] = asdict(cfg.grid)
    out["out"] = None
    return out
