"""Run configuration: a flat INI file with material, solver, training, run and paths sections."""
from __future__ import annotations

import configparser
import io
import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .dynamics import SolverConfig
from .energy import MaterialParams
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunOptions:
    seed: int = 0
    threads: int = 1
    postprocess: bool = False
    zero_hidden: bool = False
    n_val: int = 4
    frames_per_motion: int = 150
    motion_repeats: int = 4
    shape: tuple = ()


PATH_KEYS = ("garment", "body", "motions", "out", "model", "reference")


@dataclass
class RunConfig:
    material: MaterialParams = field(default_factory=MaterialParams)
    solver: SolverConfig = field(default_factory=SolverConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    run: RunOptions = field(default_factory=RunOptions)
    paths: dict = field(default_factory=dict)
    source: str | None = None

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        for name in ("material", "solver", "training", "run"):
            obj = getattr(self, name)
            cp[name] = {f.name: _dump(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
        cp["paths"] = {k: str(v) for k, v in self.paths.items()}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()


def _dump(v) -> str:
    if isinstance(v, (tuple, list)):
        return ", ".join(repr(float(x)) if isinstance(x, float) else str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _convert(raw: str, default, hint):
    text = raw.strip()
    try:
        if isinstance(default, bool) or hint is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, tuple) or hint is tuple:
            return tuple(float(t) for t in text.replace(",", " ").split()) if text else ()
        if isinstance(default, int) or hint is int:
            return int(text)
        if isinstance(default, float) or hint is float:
            return float(text)
        if default is None:
            if text.lower() in ("", "none"):
                return None
            return float(text) if any(c in text for c in ".eE") else int(text)
    except ValueError as exc:
        raise ConfigError(f"cannot parse {text!r}") from exc
    return text


def _section(cp, name, cls, overrides=None):
    base = cls()
    values = dict(overrides or {})
    if cp.has_section(name):
        known = {f.name: f for f in dataclasses.fields(cls)}
        hints = typing.get_type_hints(cls)
        for key, raw in cp.items(name):
            if key not in known:
                raise ConfigError(f"unknown key '{key}' in section [{name}]")
            hint = hints.get(key)
            base_hint = hint if hint in (bool, int, float, tuple) else None
            try:
                values[key] = _convert(raw, getattr(base, key), base_hint)
            except ConfigError as exc:
                raise ConfigError(f"[{name}] {key}: {exc}") from exc
    try:
        return dataclasses.replace(base, **values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{name}]: {exc}") from exc


def load_config(path=None, text: str | None = None) -> RunConfig:
    """Parse an INI run configuration; unknown sections or keys raise :class:`ConfigError`."""
    cp = configparser.ConfigParser(interpolation=None)
    base_dir = Path.cwd()
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise FileNotFoundError(f"config file not found: {p}")
        text = p.read_text()
        base_dir = p.resolve().parent
    try:
        cp.read_string(text or "")
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    allowed = {"material", "solver", "training", "run", "paths"}
    extra = set(cp.sections()) - allowed
    if extra:
        raise ConfigError(f"unknown section(s): {sorted(extra)}")
    material = _section(cp, "material", MaterialParams)
    solver = _section(cp, "solver", SolverConfig)
    training = _section(cp, "training", TrainConfig)
    run = _section(cp, "run", RunOptions)
    paths = {}
    if cp.has_section("paths"):
        for key, raw in cp.items("paths"):
            if key not in PATH_KEYS:
                raise ConfigError(f"unknown key '{key}' in section [paths]")
            paths[key] = (base_dir / raw.strip()).resolve()
    return RunConfig(material, solver, training, run, paths, str(path) if path else None)
