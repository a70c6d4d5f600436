"""Run configuration: INI files with a mandatory ``[units]`` section.

Values not given in the file fall back to :data:`DEFAULTS`. Overrides
``section.key=value`` are applied last. Relative output directories are
resolved against ``$DGEEG_OUTPUT_ROOT`` when that is set.
"""
import configparser
import os
from pathlib import Path

OUTPUT_ROOT_ENV = "DGEEG_OUTPUT_ROOT"

UNITS = {"length": "mm", "conductivity": "S/m", "moment": "A*mm"}

DEFAULTS = {
    "units": dict(UNITS),
    "model": {
        "names": "brain, csf, skull, skin",
        "radii": "78, 80, 86, 92",
        "conductivities": "0.33, 1.79, 0.01, 0.43",
        "skull_radius": "",
    },
    "mesh": {"seg_mm": "4", "h_mm": "4"},
    "scheme": {"name": "dg", "eta": "0.39", "penalty_factor": "3"},
    "solver": {"tol": "1e-10", "maxiter": "5000", "preconditioner": "amg"},
    "sources": {
        "eccentricities": "0.1, 0.3, 0.5, 0.7, 0.8, 0.9, 0.964, 0.979, 0.987, 0.991",
        "count": "10",
        "seed": "0",
        "orientation": "radial",
        "magnitude": "1.0",
    },
    "dipole": {"position": "0, 0, 39", "direction": "0, 0, 1"},
    "series": {"order": "400", "tolerance": "1e-8"},
    # right-hand-side quadrature degrees (per axis); a convergence-study knob
    "quadrature": {"cell": "5", "face": "5", "boundary": "9"},
    "sweep": {"schemes": "cg, dg", "skull_radii": "", "tol": "1e-6"},
    "fluxvis": {"position": "1, 47, 47", "direction": "0, 1, 1", "schemes": "cg, dg"},
    "transfer": {"electrodes": "32", "reference": "0", "seed": "0"},
    "output": {"dir": "dgeeg-out", "vtk": "no"},
}


class ConfigError(ValueError):
    pass


def load_config(path=None, overrides=()):
    cp = configparser.ConfigParser(interpolation=None)
    cp.read_dict(DEFAULTS)
    if path is not None:
        user = configparser.ConfigParser(interpolation=None)
        if not user.read(path):
            raise ConfigError(f"cannot read config file {path}")
        if not user.has_section("units"):
            raise ConfigError(f"{path}: missing mandatory [units] section")
        cp.read_dict({s: dict(user.items(s, raw=True)) for s in user.sections()})
    for item in overrides:
        key, sep, value = item.partition("=")
        section, dot, option = key.strip().partition(".")
        if not sep or not dot:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        if not cp.has_section(section):
            cp.add_section(section)
        cp.set(section, option, value.strip())
    for k, v in UNITS.items():
        if cp.get("units", k, fallback="").replace(" ", "") != v:
            raise ConfigError(f"units.{k} must be {v!r}, got {cp.get('units', k, fallback='')!r}")
    return cp


def floats(cp, section, key):
    raw = cp.get(section, key, fallback="").strip()
    if not raw:
        return []
    try:
        return [float(v) for v in raw.replace(";", ",").split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"{section}.{key}: {exc}") from None


def words(cp, section, key):
    return [w.strip() for w in cp.get(section, key, fallback="").split(",") if w.strip()]


def output_dir(cp):
    d = Path(cp.get("output", "dir"))
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not d.is_absolute():
        d = Path(root) / d
    d.mkdir(parents=True, exist_ok=True)
    return d
