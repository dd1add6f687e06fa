"""Typed experiment configuration: TOML sections, strict key checking.

Unknown sections or keys are errors; a typo never silently disappears
into a default.  All preset values live in the config files shipped under
presets/, not in code.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .distributions import EmpiricalSet, GaussianSpec, GmmSpec, load_empirical_csv
from .policy import ConfigError
from .systems import (ObstacleField, SystemSpec, double_integrator_2d,
                      linear_system, saturating_drift_2d, single_integrator)

_SCHEMA = {
    "experiment": {"name", "seed"},
    "system": {"preset", "dt", "horizon", "input_gain", "dim", "A", "B"},
    "source": {"kind", "mean", "cov", "cov_diag", "weights", "means", "cov_diags",
               "modes", "radius", "position_var", "velocity_var", "path"},
    "target": {"kind", "mean", "cov", "cov_diag", "weights", "means", "cov_diags",
               "modes", "radius", "position_var", "velocity_var"},
    "policy": {"hidden", "activation", "alpha", "l_pi"},
    "obstacles": {"centers", "radius", "weight", "project_to_positions"},
    "train": {"lambda_kl", "batch_size", "lr", "weight_decay", "steps",
              "eval_every", "eval_samples"},
    "eval": {"metric_samples", "trajectory_samples"},
}

_REQUIRED = {"experiment", "system", "source", "target", "policy", "train"}


@dataclass
class ExperimentConfig:
    name: str
    seed: int
    raw: dict
    base_dir: Path
    path: Path | None = None

    def section(self, name: str) -> dict:
        return self.raw.get(name, {})


def _check_keys(raw: dict):
    for section, body in raw.items():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        if not isinstance(body, dict):
            raise ConfigError(f"[{section}] must be a table")
        for key in body:
            if key not in _SCHEMA[section]:
                raise ConfigError(f"unknown key {section}.{key}")
    missing = _REQUIRED - set(raw)
    if missing:
        raise ConfigError(f"missing required sections: {sorted(missing)}")


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    with open(path, "rb") as f:
        try:
            raw = tomllib.load(f)
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"{path}: {e}") from e
    _check_keys(raw)
    exp = raw["experiment"]
    if "name" not in exp or "seed" not in exp:
        raise ConfigError("experiment.name and experiment.seed are required")
    return ExperimentConfig(str(exp["name"]), int(exp["seed"]), raw, path.parent, path)


def build_system(cfg: ExperimentConfig) -> SystemSpec:
    sec = cfg.section("system")
    preset = sec.get("preset")
    horizon = sec.get("horizon")
    if horizon is None:
        raise ConfigError("system.horizon is required")
    horizon = int(horizon)
    if preset == "double_integrator_2d":
        return double_integrator_2d(dt=float(sec.get("dt", 0.1)), horizon=horizon)
    if preset == "saturating_drift_2d":
        return saturating_drift_2d(horizon=horizon,
                                   input_gain=float(sec.get("input_gain", 1.0)))
    if preset == "single_integrator":
        return single_integrator(dim=int(sec.get("dim", 2)),
                                 dt=float(sec.get("dt", 0.1)), horizon=horizon)
    if preset == "custom_linear":
        if "A" not in sec or "B" not in sec:
            raise ConfigError("custom_linear needs system.A and system.B matrices")
        return linear_system(np.array(sec["A"], dtype=float),
                             np.array(sec["B"], dtype=float), horizon=horizon,
                             dt=float(sec.get("dt", 1.0)))
    raise ConfigError(f"unknown system.preset {preset!r}")


def _gaussian_from(sec: dict, what: str) -> GaussianSpec:
    if "mean" not in sec:
        raise ConfigError(f"{what}.mean is required for a gaussian")
    mean = np.array(sec["mean"], dtype=float)
    if "cov" in sec:
        cov = np.array(sec["cov"], dtype=float)
    elif "cov_diag" in sec:
        cov = np.diag(np.array(sec["cov_diag"], dtype=float))
    else:
        raise ConfigError(f"{what} needs cov or cov_diag")
    try:
        return GaussianSpec(mean, cov)
    except ValueError as e:
        raise ConfigError(f"{what}: {e}") from e


def _gmm_from(sec: dict, what: str) -> GmmSpec:
    for key in ("weights", "means", "cov_diags"):
        if key not in sec:
            raise ConfigError(f"{what}.{key} is required for a gmm")
    comps = [GaussianSpec(np.array(m, dtype=float), np.diag(np.array(d, dtype=float)))
             for m, d in zip(sec["means"], sec["cov_diags"])]
    try:
        return GmmSpec(np.array(sec["weights"], dtype=float), comps)
    except ValueError as e:
        raise ConfigError(f"{what}: {e}") from e


def _gmm_ring(sec: dict, state_dim: int, what: str) -> GmmSpec:
    modes = int(sec.get("modes", 8))
    radius = float(sec.get("radius", 6.0))
    pos_var = float(sec.get("position_var", 0.25))
    vel_var = float(sec.get("velocity_var", 0.04))
    if state_dim < 2:
        raise ConfigError(f"{what}: gmm_ring needs at least 2 state dimensions")
    comps = []
    for i in range(modes):
        th = 2.0 * np.pi * i / modes
        mean = np.zeros(state_dim)
        mean[0] = radius * np.cos(th)
        mean[1] = radius * np.sin(th)
        diag = np.full(state_dim, vel_var)
        diag[:2] = pos_var
        comps.append(GaussianSpec(mean, np.diag(diag)))
    return GmmSpec(np.full(modes, 1.0 / modes), comps)


def build_distribution(cfg: ExperimentConfig, section: str, state_dim: int):
    sec = cfg.section(section)
    kind = sec.get("kind")
    if kind == "gaussian":
        d = _gaussian_from(sec, section)
    elif kind == "gmm":
        d = _gmm_from(sec, section)
    elif kind == "gmm_ring":
        d = _gmm_ring(sec, state_dim, section)
    elif kind == "samples":
        if section == "target":
            raise ConfigError(
                "target.kind = 'samples' is not trainable: the maximum-likelihood "
                "objective needs an explicit target density")
        if "path" not in sec:
            raise ConfigError("source.path is required for kind = 'samples'")
        p = Path(sec["path"])
        if not p.is_absolute():
            p = cfg.base_dir / p
        d = load_empirical_csv(p)
    else:
        raise ConfigError(f"unknown {section}.kind {kind!r}")
    if d.dim != state_dim:
        raise ConfigError(f"{section} dimension {d.dim} does not match state dim {state_dim}")
    return d


def build_obstacles(cfg: ExperimentConfig, system: SystemSpec) -> ObstacleField | None:
    sec = cfg.section("obstacles")
    if not sec:
        return None
    centers = sec.get("centers", [])
    radius = float(sec.get("radius", 1.0))
    weight = float(sec.get("weight", 10.0))
    projection = None
    if sec.get("project_to_positions", False):
        projection = np.hstack([np.eye(2), np.zeros((2, system.state_dim - 2))])
    try:
        return ObstacleField([(np.array(c, dtype=float), radius, weight)
                              for c in centers], projection=projection)
    except ValueError as e:
        raise ConfigError(f"obstacles: {e}") from e
