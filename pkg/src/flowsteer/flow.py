"""Closed-loop rollout of the controlled system as a discrete normalizing flow.

Each step applies the transition map
    Phi_k(x) = x + phi_k(x) + B_k pi_k(x)
while forward-mode lifting carries the exact per-step Jacobian, whose
log-determinant lands on the tape next to the states.  Under the Lipschitz
budget the update g_k = phi_k + B_k pi_k is a contraction, which makes
every Phi_k invertible by plain fixed-point iteration and keeps
det grad Phi_k strictly positive, bounded below by (1 - L_g)^n.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .policy import BoundStack, PolicyStack
from .systems import SystemSpec


class FixedPointError(RuntimeError):
    """Inverse iteration failed to reach the requested residual."""

    def __init__(self, msg, residual=None):
        super().__init__(msg)
        self.residual = residual


class Trajectory:
    """One sample's path: states, controls, and per-step log-determinants."""

    def __init__(self, states, controls, logdets):
        self.states = states          # N+1 state vectors
        self.controls = controls      # N control vectors
        self.logdets = logdets        # N floats, log det grad Phi_k
        if len(states) != len(controls) + 1 or len(controls) != len(logdets):
            raise ValueError("inconsistent trajectory lengths")
        if not np.all(np.isfinite(logdets)):
            raise ValueError("non-finite log-determinant in trajectory")

    @property
    def total_logdet(self) -> float:
        return float(np.sum(self.logdets))


class RolloutBatch:
    """B trajectories sharing one policy stack and system.

    When produced on a tape, ``state_nodes`` / ``control_nodes`` /
    ``logdet_nodes`` are tape tensors; the plain-array views below always
    work.  Batch statistics are filled in by the loss assembly.
    """

    def __init__(self, system: SystemSpec, state_nodes, control_nodes, logdet_nodes):
        self.system = system
        self.state_nodes = state_nodes
        self.control_nodes = control_nodes
        self.logdet_nodes = logdet_nodes
        self.mean_effort = None
        self.mean_potential = None
        self.mean_nll = None

    @property
    def horizon(self) -> int:
        return len(self.control_nodes)

    @property
    def batch_size(self) -> int:
        return ad.value_of(self.state_nodes[0]).shape[0]

    @property
    def states(self) -> np.ndarray:
        """(N+1, B, n) array of states."""
        return np.stack([ad.value_of(s) for s in self.state_nodes])

    @property
    def controls(self) -> np.ndarray:
        return np.stack([ad.value_of(u) for u in self.control_nodes])

    @property
    def logdets(self) -> np.ndarray:
        """(N, B) per-step log-determinants."""
        return np.stack([ad.value_of(l) for l in self.logdet_nodes])

    def total_logdet_node(self):
        total = self.logdet_nodes[0]
        for l in self.logdet_nodes[1:]:
            total = ad.add(total, l)
        return total

    def trajectory(self, b: int) -> Trajectory:
        return Trajectory([s[b] for s in self.states],
                          [u[b] for u in self.controls],
                          np.array([l[b] for l in self.logdets]))


def step(system: SystemSpec, controller, k: int, x):
    """One transition: returns (x_next, u, logdet_k), all recorded when
    x lives on a tape.

    ``controller`` is a PolicyStack or BoundStack; its Lipschitz budget is
    what guarantees the Jacobian determinant stays positive.
    """
    xv = ad.value_of(x)
    n = xv.shape[-1]
    seed_data = np.broadcast_to(np.eye(n), xv.shape[:-1] + (n, n)).copy()
    seed = x.tape.constant(seed_data, op="jac_seed") if isinstance(x, ad.Tensor) else seed_data
    xd = ad.Dual(x, seed)
    ud = controller.act(k, xd)
    phid = system.drift(k, xd)
    Bt = system.B(k).T
    xnextd = ad.add(ad.add(xd, phid), ad.matmul(ud, Bt))
    jac = ad.transpose(xnextd.tangent)
    try:
        ld = ad.logdet(jac)
    except ad.SingularMatrixError as e:
        raise ad.SingularMatrixError(
            f"step {k}: transition Jacobian not orientation-preserving "
            f"(Lipschitz budget violated?): {e}") from e
    return xnextd.value, ud.value, ld


def rollout(system: SystemSpec, controller, x0) -> RolloutBatch:
    """Compose all N transition maps over a batch of initial states."""
    if isinstance(controller, BoundStack):
        x = controller.tape.constant(x0)
    elif isinstance(x0, ad.Tensor):
        x = x0
    else:
        x = np.asarray(x0, dtype=np.float64)
    states, controls, logdets = [x], [], []
    for k in range(system.horizon):
        x, u, ld = step(system, controller, k, x)
        states.append(x)
        controls.append(u)
        logdets.append(ld)
    return RolloutBatch(system, states, controls, logdets)


def nll_term(batch: RolloutBatch, target):
    """Policy-dependent part of KL(rho_N || rho_f):

        -(1/B) sum_b [ log p_f(x_N) + sum_k logdet grad Phi_k ]

    The dropped constant E[log p_i] does not depend on the policy; add the
    source's mean log-density back to reconstruct the full divergence.
    """
    from .distributions import require_target

    require_target(target)
    lp = target.log_pdf(batch.state_nodes[-1])
    tot = ad.add(lp, batch.total_logdet_node())
    B = batch.batch_size
    return ad.scale(ad.tsum(tot), -1.0 / B)


def step_contraction(system: SystemSpec, budget, k: int) -> float:
    """L_g = L_phi + sigma_B * alpha * L_pi for step k (must be < 1)."""
    l_pi = np.broadcast_to(budget.l_pi, (system.horizon,))
    return float(system.l_phi[k] + system.sigma_b[k] * budget.alpha * l_pi[k])


def logdet_lower_bound(system: SystemSpec, budget, k: int) -> float:
    """n * log(1 - L_g): every per-step log-determinant exceeds this."""
    return system.state_dim * np.log(1.0 - step_contraction(system, budget, k))


def invert_step(system: SystemSpec, controller, k: int, y, tol: float = 1e-10,
                max_iter: int = 200) -> np.ndarray:
    """Solve Phi_k(x) = y by the contraction fixed point x <- y - g_k(x)."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    y = np.asarray(y, dtype=np.float64)
    Bt = system.B(k).T

    def g(x):
        return ad.value_of(system.drift(k, x)) + ad.value_of(controller.act(k, x)) @ Bt

    x = y.copy()
    for _ in range(max_iter):
        x = y - g(x)
        residual = np.linalg.norm(x + g(x) - y, axis=-1)
        if np.max(residual) <= tol:
            return x
    raise FixedPointError(
        f"invert_step: no convergence at step {k} after {max_iter} iterations "
        f"(max residual {np.max(residual):.3e}, tol {tol:.1e})",
        residual=float(np.max(residual)))


def invert_flow(system: SystemSpec, controller, xN, tol: float = 1e-10,
                max_iter: int = 200) -> np.ndarray:
    """Pull terminal states back through all N inverse steps."""
    x = np.asarray(xN, dtype=np.float64)
    for k in reversed(range(system.horizon)):
        x = invert_step(system, controller, k, x, tol=tol, max_iter=max_iter)
    return x


def dump_trajectories_csv(batch: RolloutBatch, path, max_samples: int | None = None):
    """Write (sample_id, k, x_1..x_n, u_1..u_m, logdet_k) rows.

    The k = N row carries the terminal state with empty control/logdet
    fields.
    """
    states, controls, logdets = batch.states, batch.controls, batch.logdets
    n = states.shape[-1]
    m = controls.shape[-1]
    B = states.shape[1] if max_samples is None else min(max_samples, states.shape[1])
    N = batch.horizon
    path = Path(path)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["sample_id", "k"]
                   + [f"x_{i + 1}" for i in range(n)]
                   + [f"u_{i + 1}" for i in range(m)]
                   + ["logdet_k"])
        for b in range(B):
            for k in range(N):
                w.writerow([b, k] + [repr(float(v)) for v in states[k, b]]
                           + [repr(float(v)) for v in controls[k, b]]
                           + [repr(float(logdets[k, b]))])
            w.writerow([b, N] + [repr(float(v)) for v in states[N, b]] + [""] * m + [""])
    return path


def load_trajectories_csv(path):
    """Inverse of :func:`dump_trajectories_csv`; returns (states, controls, logdets)."""
    path = Path(path)
    with open(path, newline="") as f:
        r = csv.reader(f)
        header = next(r)
        n = sum(1 for h in header if h.startswith("x_"))
        m = sum(1 for h in header if h.startswith("u_"))
        rows = list(r)
    ids = sorted({int(row[0]) for row in rows})
    ks = sorted({int(row[1]) for row in rows})
    N = max(ks)
    B = len(ids)
    states = np.zeros((N + 1, B, n))
    controls = np.zeros((N, B, m))
    logdets = np.zeros((N, B))
    for row in rows:
        b, k = int(row[0]), int(row[1])
        states[k, b] = [float(v) for v in row[2:2 + n]]
        if k < N:
            controls[k, b] = [float(v) for v in row[2 + n:2 + n + m]]
            logdets[k, b] = float(row[2 + n + m])
    return states, controls, logdets
