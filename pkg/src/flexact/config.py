"""Run configuration (JSON) and the bundled fixture paths."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields, replace
from importlib import resources
from pathlib import Path

from flexact.netmodel import NetworkError, OperatingLimits

DEFAULT_GRID = (0.0, 0.01, 0.02, 0.05, 0.1, 0.2, 0.5, 1.0)


class ConfigError(ValueError):
    pass


def data_path(name):
    return Path(str(resources.files("flexact") / "data" / name))


@dataclass(frozen=True)
class Settings:
    network: Path = field(default_factory=lambda: data_path("feeder41.json"))
    profiles: Path = field(default_factory=lambda: data_path("profiles41.csv"))
    step_minutes: float = 60.0
    s_base_kva: float | None = None
    limits: OperatingLimits = field(default_factory=OperatingLimits)
    # sensitivity
    levels: tuple = (0.001, 0.002, 0.005)
    reference: str = "mean"
    # signals
    kappa_v: float = 1.0
    kappa_t: float = 1.0
    thermal_mirror: str = "even"
    imb_sign_normalized: bool = True
    weighted_current: bool = False
    # dispatch
    gv: float = 0.05
    trust: float = 0.2
    max_iter: int = 15
    backend: str = "simplex"
    hierarchy: bool = True
    refresh_sensitivity: bool = False
    # sweep
    grid: tuple = DEFAULT_GRID
    knee_fraction: float = 0.8

    def with_overrides(self, **kw):
        return replace(self, **{k: v for k, v in kw.items() if v is not None})


_SECTIONS = {"sensitivity": ("levels", "reference"),
             "fas": ("kappa_v", "kappa_t", "thermal_mirror", "imb_sign_normalized", "weighted_current"),
             "activation": ("gv", "trust", "max_iter", "backend", "hierarchy", "refresh_sensitivity"),
             "pareto": ("grid", "knee_fraction")}


def load_settings(path=None):
    """Read a JSON config; relative data paths resolve against its folder."""
    if path is None:
        path = data_path("config41.json")
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    known = {f.name for f in fields(Settings)} | set(_SECTIONS)
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"{path}: unknown key(s) {unknown}")
    kw = {}
    for key in ("network", "profiles"):
        if key in raw:
            p = Path(raw[key])
            kw[key] = p if p.is_absolute() else (path.parent / p)
    for key in ("step_minutes", "s_base_kva"):
        if key in raw:
            kw[key] = raw[key]
    if "limits" in raw:
        try:
            kw["limits"] = OperatingLimits.from_dict(raw["limits"])
        except (NetworkError, TypeError) as exc:
            raise ConfigError(f"{path}: limits: {exc}") from exc
    for section, keys in _SECTIONS.items():
        block = raw.get(section, {})
        bad = sorted(set(block) - set(keys))
        if bad:
            raise ConfigError(f"{path}: unknown key(s) in {section}: {bad}")
        for k in keys:
            if k in block:
                v = block[k]
                kw[k] = tuple(float(x) for x in v) if k in ("levels", "grid") else v
    return Settings(**kw)
