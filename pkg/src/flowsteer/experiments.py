"""Config-driven experiment assembly and the end-to-end run pipeline.

A run owns its output directory (guarded by a lock file) and emits:
checkpoint, trajectory CSV, metrics CSV, convergence CSV, figures, and a
manifest listing every artifact with its content hash.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .benchmark import export_sdp, optimize_affine
from .config import (ExperimentConfig, build_distribution, build_obstacles,
                     build_system, load_config)
from .distributions import GaussianSpec, rng_stream, sample
from .flow import dump_trajectories_csv, rollout
from .metrics import report, write_metrics_csv
from .policy import ConfigError, LipschitzBudget, PolicyStack
from .training import SteeringProblem, TrainConfig, train


def default_out_root() -> Path:
    return Path(os.environ.get("FLOWSTEER_OUT_ROOT", "runs"))


@dataclass
class Assembly:
    config: ExperimentConfig
    problem: SteeringProblem
    train_config: TrainConfig


@dataclass
class RunArtifacts:
    out_dir: Path
    paths: dict = field(default_factory=dict)
    manifest_path: Path | None = None


def assemble(cfg: ExperimentConfig, steps_override: int | None = None,
             seed_override: int | None = None) -> Assembly:
    seed = cfg.seed if seed_override is None else int(seed_override)
    system = build_system(cfg)
    source = build_distribution(cfg, "source", system.state_dim)
    target = build_distribution(cfg, "target", system.state_dim)
    obstacles = build_obstacles(cfg, system)

    pol = cfg.section("policy")
    hidden = [int(h) for h in pol.get("hidden", [64, 64, 64, 64])]
    widths = [system.state_dim] + hidden + [system.input_dim]
    alpha = float(pol.get("alpha", 0.9))
    budget = LipschitzBudget.for_system(system, alpha=alpha,
                                        l_pi=pol.get("l_pi"))
    budget.check_feasible(system)
    stack = PolicyStack.create(widths, system.horizon, budget,
                               rng_stream(seed, "init"),
                               activation=str(pol.get("activation", "tanh")))

    tr = cfg.section("train")
    try:
        tc = TrainConfig(
            lambda_kl=float(tr.get("lambda_kl", 60.0)),
            batch_size=int(tr.get("batch_size", 256)),
            lr=float(tr.get("lr", 1e-3)),
            weight_decay=float(tr.get("weight_decay", 1e-4)),
            steps=int(tr.get("steps", 5000)) if steps_override is None else int(steps_override),
            seed=seed,
            eval_every=int(tr.get("eval_every", 100)),
            eval_samples=int(tr.get("eval_samples", 4096)),
        )
    except ValueError as e:
        raise ConfigError(f"train: {e}") from e
    problem = SteeringProblem(system, source, target, stack, obstacles)
    return Assembly(cfg, problem, tc)


class _RunLock:
    """One run owns its directory; concurrent runs must pick another."""

    def __init__(self, out_dir: Path):
        self.path = out_dir / ".lock"

    def __enter__(self):
        try:
            self._fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise ConfigError(
                f"output directory is locked by another run: {self.path}")
        os.write(self._fd, str(os.getpid()).encode())
        return self

    def __exit__(self, *exc):
        os.close(self._fd)
        self.path.unlink(missing_ok=True)


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    h.update(path.read_bytes())
    return h.hexdigest()


def _write_manifest(artifacts: RunArtifacts, cfg: ExperimentConfig, seed: int):
    manifest = {
        "experiment": cfg.name,
        "seed": seed,
        "artifacts": {name: _sha256(p) for name, p in sorted(artifacts.paths.items())},
    }
    path = artifacts.out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    artifacts.manifest_path = path
    return path


def run(config_path, out_dir=None, seed: int | None = None,
        steps: int | None = None, make_figures: bool = True) -> RunArtifacts:
    """assemble -> train -> evaluate -> report -> emit figures."""
    cfg = load_config(config_path)
    asm = assemble(cfg, steps_override=steps, seed_override=seed)
    used_seed = asm.train_config.seed
    out = Path(out_dir) if out_dir is not None else default_out_root() / cfg.name
    out.mkdir(parents=True, exist_ok=True)
    artifacts = RunArtifacts(out)

    with _RunLock(out):
        t0 = time.perf_counter()
        stack, log = train(asm.problem, asm.train_config)
        minutes = (time.perf_counter() - t0) / 60.0

        ckpt = out / "policies.fspol"
        stack.save(ckpt)
        artifacts.paths["checkpoint"] = ckpt

        conv = log.write_csv(out / "convergence.csv")
        artifacts.paths["convergence"] = Path(conv)

        ev = cfg.section("eval")
        metric_samples = int(ev.get("metric_samples", 1000))
        rep = report(cfg.name, asm.problem.system, stack, asm.problem.source,
                     asm.problem.target, seed=used_seed,
                     eval_samples=metric_samples, train_minutes=minutes)
        mpath = write_metrics_csv([rep], out / "metrics.csv")
        artifacts.paths["metrics"] = Path(mpath)

        traj_samples = int(ev.get("trajectory_samples", 400))
        x0 = sample(asm.problem.source, traj_samples, rng_stream(used_seed, "metrics")).samples
        batch = rollout(asm.problem.system, stack, x0)
        tpath = dump_trajectories_csv(batch, out / "trajectories.csv")
        artifacts.paths["trajectories"] = Path(tpath)

        meta = _run_meta(cfg, asm, used_seed)
        meta_path = out / "run_meta.json"
        meta_path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
        artifacts.paths["run_meta"] = meta_path

        if make_figures:
            from .figures import emit_figures
            for name, p in emit_figures(out).items():
                artifacts.paths[name] = p

        _write_manifest(artifacts, cfg, used_seed)
    return artifacts


def _run_meta(cfg: ExperimentConfig, asm: Assembly, seed: int) -> dict:
    system = asm.problem.system
    target = asm.problem.target
    meta = {
        "experiment": cfg.name,
        "seed": seed,
        "system": system.name,
        "state_dim": system.state_dim,
        "input_dim": system.input_dim,
        "horizon": system.horizon,
        "is_2d": system.state_dim == 2,
    }
    field_ = asm.problem.obstacle_field
    if field_ is not None and len(field_) > 0:
        meta["obstacles"] = [
            {"center": [float(v) for v in c], "radius": r, "weight": w}
            for c, r, w in field_.obstacles]
    if isinstance(target, GaussianSpec):
        meta["target"] = {"kind": "gaussian",
                          "mean": [float(v) for v in target.mean],
                          "cov": [[float(v) for v in row] for row in target.cov]}
    elif hasattr(target, "components"):
        meta["target"] = {
            "kind": "gmm",
            "weights": [float(w) for w in target.weights],
            "means": [[float(v) for v in c.mean] for c in target.components],
            "covs": [[[float(v) for v in row] for row in c.cov]
                     for c in target.components]}
    return meta


def run_benchmark(config_path, out_dir=None, seed: int | None = None,
                  iterations: int = 3000) -> dict:
    """Affine-policy benchmark + SDPA export for a linear-Gaussian config."""
    cfg = load_config(config_path)
    system = build_system(cfg)
    lin = system.linear_dynamics()
    if lin is None:
        raise ConfigError(
            f"benchmark needs linear dynamics; {system.name} is nonlinear")
    source = build_distribution(cfg, "source", system.state_dim)
    target = build_distribution(cfg, "target", system.state_dim)
    if not isinstance(source, GaussianSpec) or not isinstance(target, GaussianSpec):
        raise ConfigError("benchmark needs Gaussian source and target boundaries")
    lam = float(cfg.section("train").get("lambda_kl", 60.0))
    used_seed = cfg.seed if seed is None else int(seed)

    A, B = lin
    res = optimize_affine(A, B, source, target, lam=lam, horizon=system.horizon,
                          iterations=iterations, seed=used_seed)
    out = Path(out_dir) if out_dir is not None else default_out_root() / cfg.name
    out.mkdir(parents=True, exist_ok=True)

    cost_path = out / "benchmark.csv"
    with open(cost_path, "w") as f:
        f.write("instance,cost,effort,kl\n")
        f.write(f"{cfg.name},{res.cost!r},{res.effort!r},{res.kl!r}\n")

    prob = export_sdp(A, B, source, target, lam=lam, horizon=system.horizon)
    sdpa_path = prob.write(out / "covsteer.dat-s")

    return {"cost": res.cost, "effort": res.effort, "kl": res.kl,
            "cost_path": cost_path, "sdpa_path": Path(sdpa_path),
            "start_costs": res.start_costs}
