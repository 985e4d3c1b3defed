"""Run configuration: one INI file with a section per component, plus overrides.

Example::

    [run]
    seed = 7
    out = runs/overfit

    [phantom]
    kind = nested-ellipsoids
    dims = 32
    count = 4

    [geometry]
    angles = 45, 135
    detector = 64

    [model]
    d_model = 128
    query_grid = 8
    block = 4

    [train]
    max_steps = 5000
    lr_stage1_rest = 3e-4

Overrides use ``section.key=value`` strings and always win over the file.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .drr import DEFAULT_ANGLES, DEFAULT_MU, ProjectionGeometry
from .errors import ConfigurationError, ContractError
from .model import ModelConfig
from .phantom import KIND_ALIASES, KINDS, MIN_DIM
from .training import TrainConfig

SECTIONS = ("run", "phantom", "geometry", "model", "train")
ALL_SCOPES = SECTIONS[1:]


@dataclass(frozen=True)
class PhantomSettings:
    kind: str = "nested-ellipsoids"
    dims: int = 32
    count: int = 1
    spacing_mm: float = 1.0


@dataclass(frozen=True)
class GeometrySettings:
    angles: tuple[float, float] = DEFAULT_ANGLES
    sid_mm: float = 1000.0
    sdd_mm: float = 1500.0
    detector: int = 64
    pitch_mm: float | None = None
    step_mm: float | None = None
    mu: float = DEFAULT_MU

    def projection(self, angle: float) -> ProjectionGeometry:
        return ProjectionGeometry(angle, self.sid_mm, self.sdd_mm, (self.detector, self.detector),
                                  self.pitch_mm, self.step_mm)


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    out: str = "out"
    data: str | None = None
    validation: str | None = None
    chunk_size: int = 512
    workers: int = 1
    phantom: PhantomSettings = field(default_factory=PhantomSettings)
    geometry: GeometrySettings = field(default_factory=GeometrySettings)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def problems(self, scope=ALL_SCOPES) -> list[str]:
        """Every problem within ``scope`` (component names); cross-field checks need both sides in scope."""
        scope = set(scope)
        ph, geo, m = self.phantom, self.geometry, self.model
        out = []
        if "model" in scope:
            out += [f"model: {p}" for p in m.problems()]
        if "train" in scope:
            out += [f"train: {p}" for p in self.train.problems()]
        if "phantom" in scope:
            if KIND_ALIASES.get(ph.kind, ph.kind) not in KINDS:
                out.append(f"phantom: unknown kind {ph.kind!r} (choose from {', '.join(KINDS)})")
            if ph.dims < MIN_DIM:
                out.append(f"phantom: dims {ph.dims} below the minimum {MIN_DIM}")
            if ph.count < 1:
                out.append("phantom: count must be >= 1")
            if ph.spacing_mm <= 0:
                out.append("phantom: spacing_mm must be > 0")
        if {"phantom", "model"} <= scope and ph.dims != m.query_grid * m.block:
            out.append(
                f"phantom dims {ph.dims} must equal model query_grid x block = "
                f"{m.query_grid} x {m.block} = {m.query_grid * m.block}"
            )
        if {"geometry", "model"} <= scope and geo.detector != m.image_size:
            out.append(f"geometry: detector {geo.detector} must equal model image_size {m.image_size}")
        if "geometry" in scope:
            if len(geo.angles) != 2:
                out.append(f"geometry: exactly two angles required, got {len(geo.angles)}")
            try:
                geo.projection(geo.angles[0] if geo.angles else 0.0)
            except (ConfigurationError, ContractError) as exc:
                out.append(f"geometry: {exc}")
            if geo.mu <= 0:
                out.append("geometry: mu must be > 0")
        if self.chunk_size < 1:
            out.append("run: chunk_size must be >= 1")
        if self.workers < 1:
            out.append("run: workers must be >= 1")
        return out

    def validate(self, scope=ALL_SCOPES) -> "RunConfig":
        probs = self.problems(scope)
        if probs:
            raise ConfigurationError(f"{len(probs)} configuration problem(s):\n  " + "\n  ".join(probs))
        return self

    def to_dict(self) -> dict:
        return {
            "run": {k: getattr(self, k) for k in ("seed", "out", "data", "validation", "chunk_size", "workers")},
            "phantom": _plain(self.phantom),
            "geometry": _plain(self.geometry),
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
        }


def _plain(obj) -> dict:
    d = {f.name: getattr(obj, f.name) for f in fields(obj)}
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def _coerce(raw: str, default, name: str):
    """Parse an INI string to the type of the dataclass default."""
    s = raw.strip()
    if s.lower() in ("none", "") and (default is None or name in _OPTIONAL):
        return None
    if isinstance(default, bool):
        if s.lower() in ("1", "true", "yes", "on"):
            return True
        if s.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if isinstance(default, int) and name not in _FLOATS:
        return int(s)
    if isinstance(default, tuple):
        parts = [p for p in s.replace(",", " ").split() if p]
        cast = int if default and isinstance(default[0], int) else float
        return tuple(cast(p) for p in parts)
    if isinstance(default, float) or name in _FLOATS:
        return float(s)
    return s


_OPTIONAL = {"pitch_mm", "step_mm", "stage2_step_cap", "clip_norm", "data", "validation"}
_FLOATS = {"pitch_mm", "step_mm", "clip_norm"}


def _section_types(target) -> dict:
    return {f.name: getattr(target, f.name) for f in fields(target)}


def _apply(obj, values: dict, section: str, problems: list[str]):
    defaults = _section_types(obj)
    kw = {}
    for key, raw in values.items():
        if key not in defaults:
            problems.append(f"[{section}] unknown key {key!r}")
            continue
        default = defaults[key]
        if hasattr(default, "__dataclass_fields__"):
            problems.append(f"[{section}] {key!r} is a section, not a key")
            continue
        if default is None and key == "stage2_step_cap":
            default = 0
        try:
            kw[key] = _coerce(str(raw), default, key)
        except ValueError as exc:
            problems.append(f"[{section}] {key}: {exc}")
    return replace(obj, **kw) if kw else obj


def parse_overrides(items) -> dict[str, dict[str, str]]:
    out: dict[str, dict[str, str]] = {}
    for item in items or ():
        key, sep, value = item.partition("=")
        section, dot, name = key.strip().partition(".")
        if not sep or not dot:
            raise ConfigurationError(f"override {item!r} must look like section.key=value")
        out.setdefault(section, {})[name.strip()] = value.strip()
    return out


def load_run_config(path: str | os.PathLike | None = None, overrides=None, scope=ALL_SCOPES,
                    **flags) -> RunConfig:
    """Merge defaults, the INI file at ``path``, ``section.key=value`` overrides and keyword flags.

    Every problem found across all sections is reported together.
    """
    sections: dict[str, dict[str, str]] = {s: {} for s in SECTIONS}
    problems: list[str] = []
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        cp = configparser.ConfigParser()
        try:
            cp.read(path)
        except configparser.Error as exc:
            raise ConfigurationError(f"{path}: {exc}") from None
        for sec in cp.sections():
            if sec not in sections:
                problems.append(f"unknown section [{sec}]")
                continue
            sections[sec].update(cp[sec])
    for sec, vals in parse_overrides(overrides).items():
        if sec not in sections:
            problems.append(f"unknown section [{sec}] in override")
            continue
        sections[sec].update(vals)
    for key, val in flags.items():
        if val is not None:
            sections["run"][key] = str(val)

    base = RunConfig()
    run = _apply(base, {k: v for k, v in sections["run"].items()}, "run", problems) if sections["run"] else base
    try:
        ph = _apply(PhantomSettings(), sections["phantom"], "phantom", problems)
        geo = _apply(GeometrySettings(), sections["geometry"], "geometry", problems)
        model = _apply(ModelConfig(), sections["model"], "model", problems)
        train = _apply(TrainConfig(), sections["train"], "train", problems)
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(str(exc)) from None
    if "seed" in sections["run"] and "init_seed" not in sections["model"]:
        model = model.replace(init_seed=run.seed)
    if "seed" in sections["run"] and "seed" not in sections["train"]:
        train = replace(train, seed=run.seed)
    cfg = replace(run, phantom=ph, geometry=geo, model=model, train=train)
    problems += cfg.problems(scope)
    if problems:
        raise ConfigurationError(f"{len(problems)} configuration problem(s):\n  " + "\n  ".join(problems))
    return cfg
