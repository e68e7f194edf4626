"""Run configuration: YAML file + environment + command-line overrides.

Every key has a default below.  Unknown keys are rejected.  Environment
variables named ``SNFMRS_<SECTION>__<KEY>`` (for example
``SNFMRS_TRAIN__LR=3e-4``) override the file; command-line flags override
both.  Values from the environment are parsed as YAML scalars.
"""
from __future__ import annotations

import copy
import hashlib
import json
import os
from pathlib import Path

import numpy as np
import yaml

from .simulator import PriorRanges, SimConfig
from .spectral import (AcquisitionGrid, BasisSet, PeakList, SpectralError, default_peaks, load_basis,
                       synthesize_basis)

ENV_PREFIX = "SNFMRS_"

DEFAULTS: dict = {
    "seed": 0,
    "threads": 0,  # 0 = all available cores
    "grid": {"n_points": 1024, "bandwidth": 3000.0, "larmor": 297.2, "center_ppm": 4.65},
    "basis": {"file": None, "metabolites": None},
    "priors": {"order": 3, "ranges": {}, "snr_db": [4.0, 68.0], "noise_sigma": None},
    "model": {"widths": [512, 256, 128], "n_flows": 8, "flow_width": 128, "n_householder": None,
              "amortized": True, "amp_link": "softplus", "crop_ppm": [0.5, 4.5], "init_sigma": 1.0},
    "train": {"beta": 10.0, "lr": 1e-4, "batch_size": 16, "n_mc": 1, "max_batches": 10000,
              "val_period": 256, "val_size": 1024, "val_mc": 1, "patience": None, "restore_best": False,
              "ema_decay": None},
    "infer": {"draws": 1000},
    "fit": {"max_iter": 500, "crop_ppm": [0.5, 4.5]},
    "eval": {"n": 1000, "draws": 1000, "n_mc": 16, "estimator": "mean",
             "nominal": [round(0.01 * k, 2) for k in range(1, 100)],
             "gammas": None, "sweep_n": 100, "sweep_draws": 200, "pairplot_spectrum": 0},
}


class ConfigError(ValueError):
    pass


def _merge(base: dict, update: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in update.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key '{where}'")
        if isinstance(base[key], dict) and key != "ranges":
            if not isinstance(val, dict):
                raise ConfigError(f"config key '{where}' must be a mapping")
            out[key] = _merge(base[key], val, where + ".")
        else:
            out[key] = copy.deepcopy(val)
    return out


def env_overrides(environ=None) -> dict:
    environ = os.environ if environ is None else environ
    out: dict = {}
    for name, raw in sorted(environ.items()):
        if not name.startswith(ENV_PREFIX):
            continue
        parts = name[len(ENV_PREFIX):].lower().split("__")
        node = out
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = yaml.safe_load(raw)
    return out


def load_config(path=None, overrides: dict | None = None, environ=None) -> dict:
    """Defaults <- file <- environment <- overrides."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            doc = yaml.safe_load(Path(path).read_text()) or {}
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        cfg = _merge(cfg, doc)
    cfg = _merge(cfg, env_overrides(environ))
    if overrides:
        cfg = _merge(cfg, overrides)
    return cfg


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()).hexdigest()[:16]


def grid_from(cfg: dict) -> AcquisitionGrid:
    g = cfg["grid"]
    try:
        return AcquisitionGrid(int(g["n_points"]), float(g["bandwidth"]), float(g["larmor"]),
                               float(g["center_ppm"]))
    except (TypeError, ValueError, SpectralError) as exc:
        raise ConfigError(f"invalid grid settings: {exc}") from exc


def basis_from(cfg: dict) -> BasisSet:
    grid = grid_from(cfg)
    b = cfg["basis"]
    wanted = b["metabolites"]
    try:
        if b["file"]:
            basis = load_basis(b["file"], grid)
        else:
            peaks = default_peaks()
            if wanted:
                peaks = PeakList([m for m in peaks if m.name in set(wanted)])
            basis = synthesize_basis(peaks, grid)
    except FileNotFoundError as exc:
        raise ConfigError(f"basis file not found: {b['file']}") from exc
    except SpectralError as exc:
        raise ConfigError(f"basis does not fit the configured grid: {exc}") from exc
    if wanted:
        missing = set(wanted) - set(basis.names)
        if missing:
            raise ConfigError(f"basis has no metabolites {sorted(missing)}")
        basis = basis.subset(wanted)
    return basis


def priors_from(cfg: dict, basis: BasisSet) -> PriorRanges:
    p = cfg["priors"]
    try:
        return PriorRanges.default(basis.names, int(p["order"]), p["ranges"], tuple(p["snr_db"]))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def sim_from(cfg: dict, basis: BasisSet | None = None) -> SimConfig:
    basis = basis or basis_from(cfg)
    t = cfg["train"]
    ns = cfg["priors"]["noise_sigma"]
    return SimConfig(basis, priors_from(cfg, basis), int(t["batch_size"]), int(t["val_size"]),
                     int(t["val_period"]), int(cfg["seed"]), None if ns is None else float(ns))


def gammas_from(cfg: dict, priors: PriorRanges) -> np.ndarray:
    g = cfg["eval"]["gammas"]
    if g is not None:
        return np.asarray(g, dtype=np.float64)
    i = priors.names.index("gamma")
    return np.linspace(priors.lo[i], priors.hi[i], 3)
