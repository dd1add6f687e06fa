"""Full steering loss and its AdamW minimization loop.

The objective per batch is

    (1/B) sum_b [ sum_k ||u_k||^2 + sum_k V_k(x_k) ]  +  lambda * nll

where nll is the policy-dependent part of KL(rho_N || rho_f).  The
theta-independent constant E[log p_i] is omitted from the optimized value
(the argmin is unchanged); evaluation records reconstruct the full KL by
adding the source's mean log-density back whenever the source has one.
"""

from __future__ import annotations

import csv
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .distributions import is_target, require_target, rng_stream, sample
from .flow import RolloutBatch, nll_term, rollout
from .policy import PolicyStack
from .systems import ObstacleField, SystemSpec, potential


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, term: str, value: float):
        super().__init__(f"non-finite loss at step {step}: {term} = {value}")
        self.step = step
        self.term = term


@dataclass
class TrainConfig:
    lambda_kl: float = 60.0
    batch_size: int = 256
    lr: float = 1e-3
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    steps: int = 5000
    seed: int = 0
    eval_every: int = 100
    eval_samples: int = 4096

    def __post_init__(self):
        if self.lambda_kl <= 0:
            raise ValueError("lambda_kl must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.steps < 0 or self.eval_every < 1 or self.eval_samples < 1:
            raise ValueError("steps/eval_every/eval_samples out of range")


@dataclass
class LossBreakdown:
    effort: float
    potential: float
    nll: float
    total: float

    @classmethod
    def assemble(cls, effort, potential, nll, lambda_kl):
        return cls(effort, potential, nll, effort + potential + lambda_kl * nll)


@dataclass
class EvalRecord:
    step: int
    loss: LossBreakdown
    kl_estimate: float
    kl_shifted: bool            # True when the source has no density and the
    seconds: float              # estimate omits the E[log p_i] constant


@dataclass
class ConvergenceLog:
    records: list = field(default_factory=list)

    def append(self, rec: EvalRecord):
        if self.records and rec.step <= self.records[-1].step:
            raise ValueError("convergence records must have increasing step indices")
        self.records.append(rec)

    def write_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["step", "effort", "potential", "nll", "total",
                        "kl_estimate", "seconds", "kl_shifted"])
            for r in self.records:
                w.writerow([r.step, repr(r.loss.effort), repr(r.loss.potential),
                            repr(r.loss.nll), repr(r.loss.total),
                            repr(r.kl_estimate), repr(r.seconds),
                            int(r.kl_shifted)])
        return path


def _wallclock_suppressed() -> bool:
    # reproducibility switch: byte-identical logs need deterministic timing
    return os.environ.get("FLOWSTEER_NO_WALLCLOCK", "") not in ("", "0")


def total_loss(batch: RolloutBatch, obstacle_field: ObstacleField | None, target,
               lambda_kl: float):
    """Scalar loss node plus its exact decomposition.

    total = effort + potential + lambda * nll, with each part a batch mean.
    """
    B = batch.batch_size
    effort = None
    for u in batch.control_nodes:
        term = ad.sum_last(ad.mul(u, u))
        effort = term if effort is None else ad.add(effort, term)
    effort = ad.scale(ad.tsum(effort), 1.0 / B)

    pot = None
    if obstacle_field is not None and len(obstacle_field) > 0:
        for x in batch.state_nodes[:-1]:
            term = potential(obstacle_field, x)
            pot = term if pot is None else ad.add(pot, term)
        pot = ad.scale(ad.tsum(pot), 1.0 / B)

    nll = nll_term(batch, target)

    total = ad.add(effort, ad.scale(nll, lambda_kl))
    if pot is not None:
        total = ad.add(total, pot)

    effort_v = float(ad.value_of(effort))
    pot_v = float(ad.value_of(pot)) if pot is not None else 0.0
    nll_v = float(ad.value_of(nll))
    breakdown = LossBreakdown(effort_v, pot_v, nll_v,
                              effort_v + pot_v + lambda_kl * nll_v)
    batch.mean_effort = effort_v
    batch.mean_potential = pot_v
    batch.mean_nll = nll_v
    return total, breakdown


class AdamW:
    """Decoupled weight decay Adam; parameters are updated in place."""

    def __init__(self, params, lr: float, weight_decay: float = 0.0,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in self.params]
        self.v = [np.zeros_like(p) for p in self.params]
        self.t = 0

    def step(self, grads):
        if len(grads) != len(self.params):
            raise ValueError("gradient list does not match parameter list")
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            if g.shape != p.shape:
                raise ValueError(f"gradient shape {g.shape} vs parameter {p.shape}")
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p -= self.lr * (update + self.weight_decay * p)


def adamw_step(param: np.ndarray, grad: np.ndarray, state: dict, lr: float,
               weight_decay: float = 0.0, beta1: float = 0.9, beta2: float = 0.999,
               eps: float = 1e-8) -> np.ndarray:
    """Single-parameter AdamW update; ``state`` holds m, v, t across calls."""
    if not state:
        state["m"] = np.zeros_like(param)
        state["v"] = np.zeros_like(param)
        state["t"] = 0
    state["t"] += 1
    t = state["t"]
    state["m"] = beta1 * state["m"] + (1 - beta1) * grad
    state["v"] = beta2 * state["v"] + (1 - beta2) * grad * grad
    m_hat = state["m"] / (1 - beta1 ** t)
    v_hat = state["v"] / (1 - beta2 ** t)
    return param - lr * (m_hat / (np.sqrt(v_hat) + eps) + weight_decay * param)


@dataclass
class SteeringProblem:
    """Everything a training run needs, already assembled and validated."""

    system: SystemSpec
    source: object
    target: object
    stack: PolicyStack
    obstacle_field: ObstacleField | None = None

    def __post_init__(self):
        require_target(self.target)
        self.stack.budget.check_feasible(self.system)


def evaluate(problem: SteeringProblem, cfg: TrainConfig,
             eval_rng: np.random.Generator) -> tuple[LossBreakdown, float, bool]:
    """Loss breakdown plus reconstructed KL on a held-out sample."""
    x0 = problem.source.sample(cfg.eval_samples, eval_rng)
    batch = rollout(problem.system, problem.stack, x0)
    _, breakdown = total_loss(batch, problem.obstacle_field, problem.target,
                              cfg.lambda_kl)
    if is_target(problem.source):
        kl = float(np.mean(np.asarray(problem.source.log_pdf(x0)))) + breakdown.nll
        shifted = False
    else:
        kl = breakdown.nll
        shifted = True
    return breakdown, kl, shifted


def train(problem: SteeringProblem, cfg: TrainConfig) -> tuple[PolicyStack, ConvergenceLog]:
    """Mini-batch AdamW loop with periodic held-out evaluation.

    Evaluation consumes its own RNG stream, so changing the eval cadence
    or sample count never perturbs the optimization path.
    """
    stack = problem.stack
    batch_rng = rng_stream(cfg.seed, "batch")
    eval_rng = rng_stream(cfg.seed, "eval")
    opt = AdamW(stack.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay,
                beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
    log = ConvergenceLog()
    no_clock = _wallclock_suppressed()
    t0 = time.perf_counter()
    dirty = False  # updates since the last 50-iteration finalization

    def record(step_idx: int):
        nonlocal dirty
        if dirty:
            # tighten the norm estimates before checking the budget snapshot
            stack.renormalize(iters=50)
            dirty = False
        sn = stack.max_spectral_norm()
        if sn > 1.0 + 1e-3:
            raise TrainingDiverged(step_idx, "spectral_norm", sn)
        breakdown, kl, shifted = evaluate(problem, cfg, eval_rng)
        seconds = 0.0 if no_clock else time.perf_counter() - t0
        log.append(EvalRecord(step_idx, breakdown, kl, shifted, seconds))

    for it in range(cfg.steps):
        if it % cfg.eval_every == 0:
            record(it)
        x0 = problem.source.sample(cfg.batch_size, batch_rng)
        tape = ad.Tape()
        bound = stack.bind(tape)
        batch = rollout(problem.system, bound, x0)
        loss, breakdown = total_loss(batch, problem.obstacle_field,
                                     problem.target, cfg.lambda_kl)
        if not np.isfinite(breakdown.total):
            for term in ("effort", "potential", "nll"):
                if not np.isfinite(getattr(breakdown, term)):
                    raise TrainingDiverged(it, term, getattr(breakdown, term))
            raise TrainingDiverged(it, "total", breakdown.total)
        grads = bound.gradients(ad.backward(loss))
        opt.step(grads)
        stack.renormalize(iters=1)  # warm-started projection after the update
        dirty = True
    record(cfg.steps)
    return stack, log
