"""Per-step MLP feedback policies under a hard Lipschitz budget.

Every weight matrix is kept at spectral norm <= 1 by projection: after
each optimizer update a warm-started power iteration re-estimates the top
singular value and divides it out when it exceeds one.  With 1-Lipschitz
activations the network is then 1-Lipschitz, and the played control
u = alpha * L_pi * net(x) stays strictly inside the invertibility budget
L_pi = (1 - L_phi) / sigma_B.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .systems import SystemSpec

_ACTIVATIONS = {
    "tanh": ad.tanh,
    # softplus shifted through zero; slope bounded by 1
    "softplus": lambda x: ad.add_scalar(ad.softplus(x), -float(np.log(2.0))),
}


class ConfigError(ValueError):
    """A structural parameter is outside its documented range."""


def spectral_normalize(W: np.ndarray, iters: int, u: np.ndarray | None = None,
                       v: np.ndarray | None = None):
    """Divide W by max(1, sigma_hat) with a power-iteration estimate.

    Returns (W_normalized, sigma_hat, u, v); pass u, v back in to warm-start
    the next call.  A zero matrix is returned unchanged (sigma_hat = 0).
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    out_dim, in_dim = W.shape
    if u is None or v is None:
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(0)))
        u = rng.standard_normal(out_dim)
        u /= np.linalg.norm(u)
        v = np.zeros(in_dim)
    norm_w = np.linalg.norm(W)
    if norm_w == 0.0:
        return W, 0.0, u, v
    for _ in range(iters):
        v = W.T @ u
        nv = np.linalg.norm(v)
        if nv == 0.0:  # u landed in the left null space; restart deterministically
            u = np.ones(out_dim) / np.sqrt(out_dim)
            v = W.T @ u
            nv = np.linalg.norm(v)
        v = v / nv
        u = W @ v
        u = u / np.linalg.norm(u)
    sigma = float(u @ W @ v)
    if sigma > 1.0:
        W = W / sigma
    return W, sigma, u, v


class MlpPolicy:
    """One step's network: linear layers with 1-Lipschitz activations."""

    def __init__(self, widths, activation: str = "tanh"):
        widths = [int(w) for w in widths]
        if len(widths) < 2:
            raise ConfigError("policy needs at least input and output widths")
        if any(w < 1 for w in widths):
            raise ConfigError(f"non-positive layer width in {widths}")
        if activation not in _ACTIVATIONS:
            raise ConfigError(f"unknown activation {activation!r}")
        self.widths = widths
        self.activation = activation
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        self._sn_u: list = []
        self._sn_v: list = []

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1

    def init_params(self, rng: np.random.Generator):
        """Scaled-uniform init, spectrally projected; zero final layer so the
        freshly built policy is the zero map."""
        self.weights, self.biases = [], []
        self._sn_u, self._sn_v = [], []
        for i in range(self.n_layers):
            fan_in, fan_out = self.widths[i], self.widths[i + 1]
            if i == self.n_layers - 1:
                W = np.zeros((fan_out, fan_in))
            else:
                bound = np.sqrt(6.0 / (fan_in + fan_out))
                W = rng.uniform(-bound, bound, size=(fan_out, fan_in))
            u0 = rng.standard_normal(fan_out)
            u0 /= np.linalg.norm(u0)
            W, _, u, v = spectral_normalize(W, iters=50, u=u0, v=np.zeros(fan_in))
            self.weights.append(W)
            self.biases.append(np.zeros(fan_out))
            self._sn_u.append(u)
            self._sn_v.append(v)
        return self

    def normalize(self, iters: int = 1):
        for i, W in enumerate(self.weights):
            Wn, _, u, v = spectral_normalize(W, iters, self._sn_u[i], self._sn_v[i])
            if Wn is not W:
                np.copyto(W, Wn)  # in place: the optimizer aliases these arrays
            self._sn_u[i], self._sn_v[i] = u, v

    def spectral_norms(self) -> np.ndarray:
        """Exact top singular value of every layer (SVD, not the estimate)."""
        return np.array([np.linalg.norm(W, 2) for W in self.weights])

    def apply(self, x, params=None):
        """Unit-Lipschitz network output; params overrides the stored arrays
        (used to evaluate with tape leaves)."""
        act = _ACTIVATIONS[self.activation]
        if params is None:
            params = list(zip(self.weights, self.biases))
        h = x
        for i, (W, b) in enumerate(params):
            h = ad.add_bias(ad.matmul(h, ad.transpose(W)), b)
            if i < self.n_layers - 1:
                h = act(h)
        return h


class LipschitzBudget:
    """alpha-scaled per-step slope budget L_pi = (1 - L_phi) / sigma_B."""

    def __init__(self, alpha: float, l_pi):
        if not 0.0 < alpha < 1.0:
            raise ConfigError(f"alpha must lie in (0, 1), got {alpha}")
        self.alpha = float(alpha)
        self.l_pi = np.atleast_1d(np.asarray(l_pi, dtype=np.float64))
        if np.any(self.l_pi <= 0.0):
            raise ConfigError("L_pi must be positive")

    @classmethod
    def for_system(cls, sys: SystemSpec, alpha: float, l_pi=None) -> "LipschitzBudget":
        derived = (1.0 - sys.l_phi) / sys.sigma_b
        if l_pi is None:
            l_pi = derived
        else:
            l_pi = np.broadcast_to(np.asarray(l_pi, dtype=np.float64), (sys.horizon,))
            if np.any(alpha * l_pi >= derived):
                raise ConfigError(
                    "requested alpha * L_pi violates the invertibility budget "
                    f"(limit {derived.min():.4g})")
        return cls(alpha, l_pi)

    def gain(self, k: int) -> float:
        return self.alpha * float(self.l_pi[min(k, len(self.l_pi) - 1)])

    def check_feasible(self, sys: SystemSpec):
        """alpha * L_pi * sigma_B + L_phi < 1 strictly, at every step."""
        l_pi = np.broadcast_to(self.l_pi, (sys.horizon,))
        closed = self.alpha * l_pi * sys.sigma_b + sys.l_phi
        if np.any(closed >= 1.0):
            k = int(np.argmax(closed))
            raise ConfigError(
                f"Lipschitz budget infeasible at step {k}: "
                f"alpha*L_pi*sigma_B + L_phi = {closed[k]:.6f} >= 1")
        return closed


class PolicyStack:
    """One independent MLP per step plus the shared budget."""

    def __init__(self, policies, budget: LipschitzBudget):
        self.policies = list(policies)
        self.budget = budget

    @classmethod
    def create(cls, widths, horizon: int, budget: LipschitzBudget,
               rng: np.random.Generator, activation: str = "tanh") -> "PolicyStack":
        policies = [MlpPolicy(widths, activation).init_params(rng) for _ in range(horizon)]
        return cls(policies, budget)

    def __len__(self):
        return len(self.policies)

    def act(self, k: int, x, params=None):
        """u = alpha * L_pi * net_k(x); Lipschitz constant <= alpha * L_pi."""
        if not 0 <= k < len(self.policies):
            raise IndexError(f"step {k} outside horizon [0, {len(self.policies)})")
        return ad.scale(self.policies[k].apply(x, params), self.budget.gain(k))

    def parameters(self) -> list[np.ndarray]:
        """Flat parameter list in a fixed (step, layer, W-then-b) order."""
        out = []
        for p in self.policies:
            for W, b in zip(p.weights, p.biases):
                out.append(W)
                out.append(b)
        return out

    def set_parameters(self, arrays):
        i = 0
        for p in self.policies:
            for j in range(p.n_layers):
                p.weights[j] = arrays[i]
                p.biases[j] = arrays[i + 1]
                i += 2

    def bind(self, tape: ad.Tape) -> "BoundStack":
        return BoundStack(self, tape)

    def renormalize(self, iters: int = 1):
        for p in self.policies:
            p.normalize(iters)

    def max_spectral_norm(self) -> float:
        return max(float(p.spectral_norms().max()) for p in self.policies)

    def save(self, path):
        save_stack(self, path)


class BoundStack:
    """A stack's parameters registered as leaves of one tape."""

    def __init__(self, stack: PolicyStack, tape: ad.Tape):
        self.stack = stack
        self.tape = tape
        self.leaves: list[ad.Tensor] = []
        self._params = []
        for p in stack.policies:
            bound = []
            for W, b in zip(p.weights, p.biases):
                lw, lb = tape.leaf(W), tape.leaf(b)
                self.leaves.extend((lw, lb))
                bound.append((lw, lb))
            self._params.append(bound)

    def act(self, k: int, x):
        return ad.scale(self.stack.policies[k].apply(x, self._params[k]),
                        self.stack.budget.gain(k))

    def gradients(self, grad: ad.Gradient) -> list[np.ndarray]:
        return [grad[leaf] for leaf in self.leaves]


# ---------------------------------------------------------------------------
# checkpoint format: one JSON header line, then raw little-endian float64
# blocks in (step, layer, W, b, u, v) order.  Bitwise round-trip.

_MAGIC = "flowsteer-policy-stack-v1"


def save_stack(stack: PolicyStack, path):
    path = Path(path)
    header = {
        "format": _MAGIC,
        "horizon": len(stack.policies),
        "widths": stack.policies[0].widths,
        "activation": stack.policies[0].activation,
        "alpha": stack.budget.alpha,
        "l_pi": [float(v) for v in np.broadcast_to(stack.budget.l_pi, (len(stack.policies),))],
    }
    with open(path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        f.write(b"\n")
        for p in stack.policies:
            for W, b, u, v in zip(p.weights, p.biases, p._sn_u, p._sn_v):
                for arr in (W, b, u, v):
                    buf = np.ascontiguousarray(arr, dtype="<f8").tobytes()
                    f.write(struct.pack("<Q", len(buf)))
                    f.write(buf)


def load_stack(path) -> PolicyStack:
    path = Path(path)
    with open(path, "rb") as f:
        header = json.loads(f.readline().decode("utf-8"))
        if header.get("format") != _MAGIC:
            raise ValueError(f"{path} is not a policy checkpoint")
        widths = header["widths"]
        horizon = header["horizon"]
        budget = LipschitzBudget(header["alpha"], np.asarray(header["l_pi"]))
        policies = []
        for _ in range(horizon):
            p = MlpPolicy(widths, header["activation"])
            for i in range(p.n_layers):
                shapes = [(widths[i + 1], widths[i]), (widths[i + 1],),
                          (widths[i + 1],), (widths[i],)]
                arrs = []
                for shape in shapes:
                    (nbytes,) = struct.unpack("<Q", f.read(8))
                    arrs.append(np.frombuffer(f.read(nbytes), dtype="<f8").reshape(shape).copy())
                p.weights.append(arrs[0])
                p.biases.append(arrs[1])
                p._sn_u.append(arrs[2])
                p._sn_v.append(arrs[3])
            policies.append(p)
    return PolicyStack(policies, budget)
