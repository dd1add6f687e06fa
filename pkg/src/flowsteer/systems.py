"""Discrete-time control-affine prior dynamics in residual form.

Every system is expressed as x_{k+1} = x_k + phi_k(x_k) + B_k u_k with a
declared Lipschitz bound on the residual drift phi_k and the spectral norm
of B_k.  Those two numbers are what the policy's Lipschitz budget is built
from, so presets must declare them honestly; tests probe the declared
bounds against sampled Jacobians.
"""

from __future__ import annotations

from typing import Callable, Optional

import numpy as np

from . import autodiff as ad


class SystemSpec:
    """Residual-form prior dynamics plus the metadata the budget needs."""

    def __init__(self, name: str, state_dim: int, input_dim: int, horizon: int,
                 drift: Callable, input_matrix, l_phi, sigma_b, dt: float = 1.0,
                 A: Optional[np.ndarray] = None):
        self.name = name
        self.state_dim = int(state_dim)
        self.input_dim = int(input_dim)
        self.horizon = int(horizon)
        self._drift = drift
        self._B = np.asarray(input_matrix, dtype=np.float64)
        if self._B.shape != (self.state_dim, self.input_dim):
            raise ValueError(f"input matrix shape {self._B.shape} vs "
                             f"({self.state_dim}, {self.input_dim})")
        self.dt = float(dt)
        self.l_phi = np.broadcast_to(np.asarray(l_phi, dtype=np.float64),
                                     (self.horizon,)).copy()
        self.sigma_b = np.broadcast_to(np.asarray(sigma_b, dtype=np.float64),
                                       (self.horizon,)).copy()
        if np.any(self.l_phi >= 1.0):
            raise ValueError("drift Lipschitz bound must satisfy L_phi < 1 at every step")
        if np.any(self.sigma_b <= 0.0):
            raise ValueError("input spectral norm must be positive")
        self.A = None if A is None else np.asarray(A, dtype=np.float64)

    def B(self, k: int) -> np.ndarray:
        return self._B

    def drift(self, k: int, x):
        """Residual drift phi_k(x); accepts arrays, tape tensors, or duals."""
        self._check_step(k)
        return self._drift(k, x)

    def _check_step(self, k: int):
        if not 0 <= k < self.horizon:
            raise IndexError(f"step {k} outside horizon [0, {self.horizon})")

    def linear_dynamics(self):
        """(A, B) when the system is linear, else None."""
        if self.A is None:
            return None
        return self.A, self._B

    def __repr__(self):
        return (f"SystemSpec({self.name!r}, n={self.state_dim}, m={self.input_dim}, "
                f"N={self.horizon})")


def drift_step(sys: SystemSpec, k: int, x):
    """Uncontrolled residual update x + phi_k(x)."""
    return ad.add(x, sys.drift(k, x))


def _linear_residual(A: np.ndarray):
    R = (A - np.eye(A.shape[0])).T.copy()

    def drift(k, x):
        return ad.matmul(x, R)

    return drift


def double_integrator_2d(dt: float = 0.1, horizon: int = 30) -> SystemSpec:
    """Planar double integrator: positions integrate velocities, inputs are
    accelerations.  L_phi = sigma_B = dt."""
    if not 0.0 < dt < 1.0:
        raise ValueError("dt must lie in (0, 1)")
    A = np.block([[np.eye(2), dt * np.eye(2)],
                  [np.zeros((2, 2)), np.eye(2)]])
    B = np.vstack([np.zeros((2, 2)), dt * np.eye(2)])
    return SystemSpec("double_integrator_2d", 4, 2, horizon,
                      _linear_residual(A), B, l_phi=dt, sigma_b=dt, dt=dt, A=A)


def saturating_drift_2d(horizon: int = 40, input_gain: float = 1.0) -> SystemSpec:
    """2-D nonlinear model whose first state sees a saturating coupling:

        x <- x + 0.1 sqrt(1 + y^2) + g u,    y <- y + 0.1 x

    The printed form has unit input gain (sigma_B = 1); ``input_gain``
    exposes the 0.1-scaled reading as a one-line override.
    """
    if input_gain <= 0:
        raise ValueError("input_gain must be positive")
    pick_x = np.array([[1.0], [0.0]])
    pick_y = np.array([[0.0], [1.0]])
    row_x = np.array([[1.0, 0.0]])
    row_y = np.array([[0.0, 1.0]])

    def drift(k, x):
        xc = ad.matmul(x, pick_x)
        yc = ad.matmul(x, pick_y)
        sat = ad.sqrt(ad.add_scalar(ad.mul(yc, yc), 1.0))
        return ad.add(ad.matmul(ad.scale(sat, 0.1), row_x),
                      ad.matmul(ad.scale(xc, 0.1), row_y))

    B = np.array([[input_gain], [0.0]])
    # sup ||grad phi||_2 = 0.1: off-diagonal entries 0.1 and 0.1*|y|/sqrt(1+y^2) < 0.1
    return SystemSpec("saturating_drift_2d", 2, 1, horizon, drift, B,
                      l_phi=0.1, sigma_b=input_gain, dt=0.1)


def single_integrator(dim: int = 2, dt: float = 0.1, horizon: int = 30) -> SystemSpec:
    """x_{k+1} = x_k + dt u_k; zero drift, full actuation."""
    if not 0.0 < dt < 1.0:
        raise ValueError("dt must lie in (0, 1)")
    A = np.eye(dim)

    def drift(k, x):
        return ad.scale(x, 0.0)

    return SystemSpec("single_integrator", dim, dim, horizon, drift,
                      dt * np.eye(dim), l_phi=0.0, sigma_b=dt, dt=dt, A=A)


def linear_system(A, B, horizon: int, dt: float = 1.0, name: str = "custom_linear") -> SystemSpec:
    """Custom linear dynamics x_{k+1} = A x + B u, rewritten in residual form.

    Requires ||A - I||_2 < 1 so the residual drift is contractive.
    """
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    n = A.shape[0]
    if A.shape != (n, n) or B.ndim != 2 or B.shape[0] != n:
        raise ValueError("A must be square and B conformable")
    l_phi = float(np.linalg.norm(A - np.eye(n), 2))
    if l_phi >= 1.0:
        raise ValueError(f"||A - I||_2 = {l_phi:.3f} >= 1: not a contractive residual")
    sigma_b = float(np.linalg.norm(B, 2))
    return SystemSpec(name, n, B.shape[1], horizon, _linear_residual(A), B,
                      l_phi=l_phi, sigma_b=sigma_b, dt=dt, A=A)


PRESETS = {
    "double_integrator_2d": double_integrator_2d,
    "saturating_drift_2d": saturating_drift_2d,
    "single_integrator": single_integrator,
}


class ObstacleField:
    """Gaussian-kernel penalty bumps on (a projection of) the state space.

    Each obstacle contributes weight * exp(-||P x - center||^2 / radius^2);
    ``projection`` picks the coordinates obstacles live in (positions, for
    the built-in vehicle systems).
    """

    def __init__(self, obstacles=(), projection: Optional[np.ndarray] = None):
        self.obstacles = []
        for center, radius, weight in obstacles:
            center = np.asarray(center, dtype=np.float64).reshape(-1)
            if radius <= 0:
                raise ValueError("obstacle radius must be positive")
            if weight < 0:
                raise ValueError("obstacle weight must be nonnegative")
            self.obstacles.append((center, float(radius), float(weight)))
        self.projection = None if projection is None else np.asarray(projection, dtype=np.float64)

    def __len__(self):
        return len(self.obstacles)

    @property
    def total_weight(self) -> float:
        return sum(w for _, _, w in self.obstacles)


def potential(field: ObstacleField, x):
    """Summed obstacle penalty, per sample; differentiable on the tape."""
    xv = ad.value_of(x)
    lead = xv.shape[:-1]
    if len(field) == 0:
        return np.zeros(lead)
    xp = x if field.projection is None else ad.matmul(x, field.projection.T)
    total = None
    for center, radius, weight in field.obstacles:
        d = ad.add_bias(xp, -center)
        q = ad.sum_last(ad.mul(d, d))
        term = ad.scale(ad.exp(ad.scale(q, -1.0 / radius ** 2)), weight)
        total = term if total is None else ad.add(total, term)
    return total
