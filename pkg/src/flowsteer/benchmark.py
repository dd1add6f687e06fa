"""KL-soft-constrained covariance steering with affine feedback.

For linear dynamics and Gaussian boundaries the optimal policy is affine,
u_k = K_k (x_k - mu_k) + v_k, and the first two moments evolve in closed
form.  This module propagates those moments exactly, evaluates the exact
expected cost, optimizes (K_k, v_k) by gradient descent on that analytic
cost, and exports the equivalent semidefinite program in sparse SDPA
format for external cross-checking.  The in-repo benchmark value always
comes from the direct optimization, never from the export.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .distributions import GaussianSpec, gaussian_kl, rng_stream
from .training import AdamW


class AffinePolicy:
    """Per-step feedback gains and feedforward terms."""

    def __init__(self, gains, feedforwards):
        self.gains = [np.asarray(K, dtype=np.float64) for K in gains]
        self.feedforwards = [np.asarray(v, dtype=np.float64).reshape(-1)
                             for v in feedforwards]
        if len(self.gains) != len(self.feedforwards):
            raise ValueError("gains and feedforwards disagree in length")

    def __len__(self):
        return len(self.gains)

    @classmethod
    def zero(cls, n: int, m: int, horizon: int) -> "AffinePolicy":
        return cls([np.zeros((m, n))] * horizon, [np.zeros(m)] * horizon)


class MomentTrajectory:
    """Means and covariances mu_0..mu_N, Sigma_0..Sigma_N."""

    def __init__(self, means, covariances):
        self.means = [np.asarray(m, dtype=np.float64) for m in means]
        self.covariances = [np.asarray(S, dtype=np.float64) for S in covariances]
        for S in self.covariances:
            if np.max(np.abs(S - S.T)) > 1e-12:
                raise ValueError("covariance lost symmetry")
            np.linalg.cholesky(S)  # SPD or raise

    @property
    def horizon(self) -> int:
        return len(self.means) - 1


def propagate(A, B, policy: AffinePolicy, mu0, Sigma0) -> MomentTrajectory:
    """Exact closed-loop moment recursion; no sampling involved."""
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    mu = np.asarray(mu0, dtype=np.float64).reshape(-1)
    Sigma = np.asarray(Sigma0, dtype=np.float64)
    means, covs = [mu], [Sigma]
    for K, v in zip(policy.gains, policy.feedforwards):
        mu = A @ mu + B @ v
        C = A + B @ K
        Sigma = C @ Sigma @ C.T
        Sigma = 0.5 * (Sigma + Sigma.T)  # keep symmetry to 1e-12 per step
        means.append(mu)
        covs.append(Sigma)
    return MomentTrajectory(means, covs)


def analytic_cost(traj: MomentTrajectory, policy: AffinePolicy, lam: float,
                  target: GaussianSpec):
    """Exact expected cost of the affine policy under Gaussian initial law.

    E||u_k||^2 = tr(K_k Sigma_k K_k^T) + ||v_k||^2; the terminal term is the
    closed-form Gaussian KL.  Returns (total, effort, kl).
    """
    if traj.horizon != len(policy):
        raise ValueError("trajectory and policy horizons disagree")
    effort = 0.0
    for K, v, S in zip(policy.gains, policy.feedforwards, traj.covariances[:-1]):
        effort += float(np.trace(K @ S @ K.T)) + float(v @ v)
    terminal = GaussianSpec(traj.means[-1], traj.covariances[-1])
    kl = gaussian_kl(terminal, target)
    return effort + lam * kl, effort, kl


def _cost_node(A, B, Ks, vs, init: GaussianSpec, target: GaussianSpec, lam: float):
    """The same cost as :func:`analytic_cost`, built from tape primitives so
    (K_k, v_k) leaves receive gradients."""
    n = init.dim
    mu = init.mean
    Sigma = init.cov
    effort = None
    for K, v in zip(Ks, vs):
        eff_k = ad.add(ad.trace(ad.matmul(ad.matmul(K, Sigma), ad.transpose(K))),
                       ad.sqnorm(v))
        effort = eff_k if effort is None else ad.add(effort, eff_k)
        mu = ad.add(ad.matmul(A, mu), ad.matmul(B, v))
        C = ad.add(A, ad.matmul(B, K))
        Sigma = ad.matmul(ad.matmul(C, Sigma), ad.transpose(C))
        Sigma = ad.scale(ad.add(Sigma, ad.transpose(Sigma)), 0.5)
    d = ad.add(target.mean, ad.scale(mu, -1.0))
    quad = ad.tsum(ad.mul(d, ad.matmul(target._prec, d)))
    logdet_f = 2.0 * float(np.log(np.diag(target.chol)).sum())
    kl = ad.scale(
        ad.add_scalar(
            ad.add(ad.add(ad.trace(ad.matmul(target._prec, Sigma)), quad),
                   ad.scale(ad.logdet(Sigma), -1.0)),
            logdet_f - n),
        0.5)
    return ad.add(effort, ad.scale(kl, lam))


@dataclass
class OptimizeResult:
    policy: AffinePolicy
    cost: float
    effort: float
    kl: float
    start_costs: list = field(default_factory=list)
    cost_history: list = field(default_factory=list)


def optimize_affine(A, B, init: GaussianSpec, target: GaussianSpec, lam: float,
                    horizon: int, iterations: int = 3000, lr: float = 0.02,
                    starts: int = 5, seed: int = 0) -> OptimizeResult:
    """Gradient minimization of the analytic cost over (K_k, v_k).

    Multi-start with best-of selection; the returned cost is the best
    iterate ever evaluated (the accepted-iterate sequence is therefore
    non-increasing by construction).
    """
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    n, m = B.shape
    rng = rng_stream(seed, "benchmark")
    best = None
    start_costs = []
    for s in range(starts):
        if s == 0:
            K0 = [np.zeros((m, n)) for _ in range(horizon)]
            v0 = [np.zeros(m) for _ in range(horizon)]
        else:
            K0 = [0.05 * rng.standard_normal((m, n)) for _ in range(horizon)]
            v0 = [0.05 * rng.standard_normal(m) for _ in range(horizon)]
        params = [a.copy() for a in K0] + [a.copy() for a in v0]
        opt = AdamW(params, lr=lr, weight_decay=0.0)
        best_here = None
        history = []
        for it in range(iterations):
            tape = ad.Tape()
            leaves = [tape.leaf(p) for p in params]
            cost = _cost_node(A, B, leaves[:horizon], leaves[horizon:],
                              init, target, lam)
            c = float(ad.value_of(cost))
            if not np.isfinite(c):
                raise FloatingPointError(
                    f"affine optimization diverged at start {s}, iteration {it}")
            if best_here is None or c < best_here[0]:
                best_here = (c, [p.copy() for p in params])
                history.append(c)
            g = ad.backward(cost)
            opt.step([g[leaf] for leaf in leaves])
        start_costs.append(best_here[0])
        if best is None or best_here[0] < best[0]:
            best = best_here
            best_history = history
    policy = AffinePolicy(best[1][:horizon], best[1][horizon:])
    traj = propagate(A, B, policy, init.mean, init.cov)
    total, effort, kl = analytic_cost(traj, policy, lam, target)
    return OptimizeResult(policy, total, effort, kl, start_costs, best_history)


# ---------------------------------------------------------------------------
# SDP assembly and sparse SDPA serialization
#
# Standard-form semantics of the emitted file:
#     min  c^T x   subject to   X(x) = sum_i x_i F_i - F_0  >= 0 (PSD),
# with symmetric blocks; negative block sizes denote diagonal blocks.
# Equalities are emitted as paired one-sided rows in the diagonal block.


@dataclass
class SdpProblem:
    n_vars: int
    block_dims: list
    objective: np.ndarray
    entries: list                       # (matno, block, i, j, value), i <= j
    objective_constant: float = 0.0
    var_names: dict = field(default_factory=dict)
    comments: list = field(default_factory=list)

    def canonical_entries(self):
        return sorted((int(m), int(b), int(i), int(j), float(v))
                      for (m, b, i, j, v) in self.entries)

    def write(self, path):
        with open(path, "w") as f:
            for line in self.comments:
                f.write(f"* {line}\n")
            f.write(f"* objective constant offset: {self.objective_constant!r}\n")
            f.write(f"{self.n_vars}\n")
            f.write(f"{len(self.block_dims)}\n")
            f.write(" ".join(str(d) for d in self.block_dims) + "\n")
            f.write(" ".join(repr(float(c)) for c in self.objective) + "\n")
            for matno, blk, i, j, val in self.canonical_entries():
                f.write(f"{matno} {blk} {i} {j} {val!r}\n")
        return path

    @staticmethod
    def read(path) -> "SdpProblem":
        lines = []
        constant = 0.0
        with open(path) as f:
            for raw in f:
                raw = raw.strip()
                if raw.startswith(("*", '"')):
                    if "objective constant offset:" in raw:
                        constant = float(raw.split(":")[-1])
                    continue
                if raw:
                    lines.append(raw)
        n_vars = int(lines[0])
        nblocks = int(lines[1])
        dims = [int(t) for t in lines[2].split()]
        if len(dims) != nblocks:
            raise ValueError("block count disagrees with dimension list")
        c = np.array([float(t) for t in lines[3].split()])
        entries = []
        for raw in lines[4:]:
            t = raw.split()
            entries.append((int(t[0]), int(t[1]), int(t[2]), int(t[3]), float(t[4])))
        return SdpProblem(n_vars, dims, c, entries, objective_constant=constant)


class _SdpBuilder:
    def __init__(self):
        self.names = {}
        self.blocks = []
        self.entries = []
        self.diag_rows = 0

    def var(self, name: str) -> int:
        if name in self.names:
            raise ValueError(f"duplicate variable {name}")
        self.names[name] = len(self.names) + 1
        return self.names[name]

    def block(self, size: int) -> int:
        self.blocks.append(size)
        return len(self.blocks)

    def put(self, matno: int, blk: int, i: int, j: int, val: float):
        if val != 0.0:
            if i > j:
                i, j = j, i
            self.entries.append((matno, blk, i, j, val))


def _sym_index_pairs(n):
    return [(i, j) for i in range(n) for j in range(i, n)]


def export_sdp(A, B, init: GaussianSpec, target: GaussianSpec, lam: float,
               horizon: int) -> SdpProblem:
    """Assemble the soft-constrained covariance-steering conic program.

    Per step: the relaxed effort constraint U_k Sigma_k^{-1} U_k^T <= Y_k as
    the Schur LMI [[Sigma_k, U_k^T], [U_k, Y_k]] >= 0, a quadratic epigraph
    for ||v_k||^2, and the exact moment equalities as paired diagonal rows.
    The terminal KL uses a quadratic epigraph for the mean term; its
    -log det(Sigma_N) part is handled by the determinant-root hypograph
    (lower-triangular factor LMI plus a geometric-mean tower) and the
    linear-fractional upper bound  -log t <= c*r - 1 - log c  with
    r >= 1/t, tangent at c = det(Sigma_f)^{1/n}, which is exact at the
    expected optimum Sigma_N = Sigma_f.  Pure PSD cones cannot represent
    the logarithm itself, so the file documents this surrogate.
    """
    A = np.asarray(A, dtype=np.float64)
    Bm = np.asarray(B, dtype=np.float64)
    n, m = Bm.shape
    N = int(horizon)
    b = _SdpBuilder()

    u_idx = {}      # (k, a, p) -> var, a in inputs, p in states
    y_idx = {}      # (k, a, b) -> var, a <= b
    v_idx = {}      # (k, a)
    s_idx = {}      # k
    sig_idx = {}    # (k, p, q) with 1 <= k <= N, p <= q
    mu_idx = {}     # (k, p)
    for k in range(N):
        for a in range(m):
            for p in range(n):
                u_idx[(k, a, p)] = b.var(f"U{k}[{a},{p}]")
        for a, bb in _sym_index_pairs(m):
            y_idx[(k, a, bb)] = b.var(f"Y{k}[{a},{bb}]")
        for a in range(m):
            v_idx[(k, a)] = b.var(f"v{k}[{a}]")
        s_idx[k] = b.var(f"s{k}")
    for k in range(1, N + 1):
        for p, q in _sym_index_pairs(n):
            sig_idx[(k, p, q)] = b.var(f"Sigma{k}[{p},{q}]")
        for p in range(n):
            mu_idx[(k, p)] = b.var(f"mu{k}[{p}]")
    q_var = b.var("q_mean")
    z_idx = {}
    for p in range(n):
        for r_ in range(p, n):
            z_idx[(r_, p)] = b.var(f"Z[{r_},{p}]")  # lower triangular
    r_var = b.var("r_recip")

    def sigma_coeff(k, p, q):
        """(var, scale) pairs representing Sigma_k[p, q], or a constant."""
        if k == 0:
            return None, init.cov[p, q]
        if p <= q:
            return sig_idx[(k, p, q)], None
        return sig_idx[(k, q, p)], None

    # --- per-step Schur LMIs [[Sigma_k, U_k^T], [U_k, Y_k]], size n+m
    for k in range(N):
        blk = b.block(n + m)
        for p in range(n):
            for q in range(p, n):
                var, const = sigma_coeff(k, p, q)
                if var is None:
                    b.put(0, blk, p + 1, q + 1, -const)  # F0 = -constant part
                else:
                    b.put(var, blk, p + 1, q + 1, 1.0)
        for a in range(m):
            for p in range(n):
                b.put(u_idx[(k, a, p)], blk, p + 1, n + a + 1, 1.0)
        for a, bb in _sym_index_pairs(m):
            b.put(y_idx[(k, a, bb)], blk, n + a + 1, n + bb + 1, 1.0)

    # --- ||v_k||^2 <= s_k epigraphs, size m+1
    for k in range(N):
        blk = b.block(m + 1)
        for a in range(m):
            b.put(0, blk, a + 1, a + 1, -1.0)  # identity block
            b.put(v_idx[(k, a)], blk, a + 1, m + 1, 1.0)
        b.put(s_idx[k], blk, m + 1, m + 1, 1.0)

    # --- terminal mean epigraph [[Sigma_f, mu_f - mu_N], [., q]], size n+1
    blk = b.block(n + 1)
    for p in range(n):
        for q in range(p, n):
            b.put(0, blk, p + 1, q + 1, -target.cov[p, q])
        b.put(0, blk, p + 1, n + 1, -target.mean[p])
        b.put(mu_idx[(N, p)], blk, p + 1, n + 1, -1.0)
    b.put(q_var, blk, n + 1, n + 1, 1.0)

    # --- determinant-root hypograph [[Sigma_N, Z], [Z^T, diag(Z)]], size 2n
    blk = b.block(2 * n)
    for p, q in _sym_index_pairs(n):
        b.put(sig_idx[(N, p, q)], blk, p + 1, q + 1, 1.0)
    for (r_, p), var in z_idx.items():
        b.put(var, blk, p + 1, n + r_ + 1, 1.0)  # Z[r, p] at (row p? see note)
    for p in range(n):
        b.put(z_idx[(p, p)], blk, n + p + 1, n + p + 1, 1.0)

    # --- geometric-mean tower: t <= (prod Z_pp)^(1/n) via 2x2 blocks
    diag_extra = []  # one-sided rows t <= x for degenerate levels
    leaves = [z_idx[(p, p)] for p in range(n)]
    t_var = None
    if n == 1:
        t_var = b.var("t_det")
        diag_extra.append(([(leaves[0], 1.0), (t_var, -1.0)], 0.0))
    else:
        level = leaves
        # pad with the (not yet created) root: standard trick pads with t
        padded = 1 << (len(level) - 1).bit_length()
        t_var = b.var("t_det")
        level = level + [t_var] * (padded - len(level))
        gm_count = 0
        while len(level) > 2:
            nxt = []
            for i in range(0, len(level), 2):
                g = b.var(f"gm{gm_count}")
                gm_count += 1
                blk2 = b.block(2)
                b.put(level[i], blk2, 1, 1, 1.0)
                b.put(g, blk2, 1, 2, 1.0)
                b.put(level[i + 1], blk2, 2, 2, 1.0)
                nxt.append(g)
            level = nxt
        blk2 = b.block(2)
        b.put(level[0], blk2, 1, 1, 1.0)
        b.put(t_var, blk2, 1, 2, 1.0)
        b.put(level[1], blk2, 2, 2, 1.0)

    # --- r >= 1/t as [[r, 1], [1, t]] >= 0
    blk = b.block(2)
    b.put(r_var, blk, 1, 1, 1.0)
    b.put(0, blk, 1, 2, -1.0)
    b.put(t_var, blk, 2, 2, 1.0)

    # --- moment equalities as paired diagonal rows
    equalities = []  # (list of (var, coeff), constant) meaning sum = constant

    for k in range(N):
        # mu_{k+1} = A mu_k + B v_k
        for i in range(n):
            terms = [(mu_idx[(k + 1, i)], 1.0)]
            const = 0.0
            if k == 0:
                const += float(A[i] @ init.mean)
            else:
                for p in range(n):
                    terms.append((mu_idx[(k, p)], -A[i, p]))
            for a in range(m):
                terms.append((v_idx[(k, a)], -Bm[i, a]))
            equalities.append((terms, const))
        # Sigma_{k+1} = A S A^T + B U A^T + A U^T B^T + B Y B^T
        for i, j in _sym_index_pairs(n):
            terms = [(sig_idx[(k + 1, i, j)], 1.0)]
            const = 0.0
            # A Sigma_k A^T
            for p in range(n):
                for q in range(n):
                    coeff = A[i, p] * A[j, q]
                    var, c0 = sigma_coeff(k, min(p, q), max(p, q))
                    if var is None:
                        const += coeff * c0
                    else:
                        # collect duplicated off-diagonal coordinates
                        terms.append((var, -coeff))
            # B U A^T + A U^T B^T
            for a in range(m):
                for p in range(n):
                    coeff = Bm[i, a] * A[j, p] + Bm[j, a] * A[i, p]
                    terms.append((u_idx[(k, a, p)], -coeff))
            # B Y B^T
            for a in range(m):
                for bb in range(m):
                    coeff = Bm[i, a] * Bm[j, bb]
                    aa, bb2 = min(a, bb), max(a, bb)
                    terms.append((y_idx[(k, aa, bb2)], -coeff))
            equalities.append((terms, const))

    diag_rows = 2 * len(equalities) + len(diag_extra)
    if diag_rows:
        dblk = b.block(-diag_rows)
        row = 1
        for terms, const in equalities:
            merged = {}
            for var, coeff in terms:
                merged[var] = merged.get(var, 0.0) + coeff
            for sign in (1.0, -1.0):
                for var, coeff in merged.items():
                    b.put(var, dblk, row, row, sign * coeff)
                b.put(0, dblk, row, row, sign * const)
                row += 1
        for terms, const in diag_extra:
            for var, coeff in terms:
                b.put(var, dblk, row, row, coeff)
            b.put(0, dblk, row, row, const)
            row += 1

    # --- objective
    c = np.zeros(len(b.names))
    for k in range(N):
        for a in range(m):
            c[y_idx[(k, a, a)] - 1] += 1.0
        c[s_idx[k] - 1] += 1.0
    prec = target._prec
    for p, q in _sym_index_pairs(n):
        factor = 1.0 if p == q else 2.0
        c[sig_idx[(N, p, q)] - 1] += 0.5 * lam * factor * prec[p, q]
    c[q_var - 1] += 0.5 * lam
    det_root = float(np.exp(2.0 * np.log(np.diag(target.chol)).sum() / n))
    c[r_var - 1] += 0.5 * lam * n * det_root
    objective_constant = -lam * n

    prob = SdpProblem(
        n_vars=len(b.names),
        block_dims=b.blocks,
        objective=c,
        entries=b.entries,
        objective_constant=objective_constant,
        var_names=dict(b.names),
        comments=[
            "soft-constrained covariance steering (KL penalty), standard form:",
            "  min c'x  s.t.  sum_i x_i F_i - F_0 >= 0",
            f"n={n} m={m} N={N} lambda={lam!r}",
            "-log det(Sigma_N) is bounded above via t <= det(Sigma_N)^(1/n),",
            "r >= 1/t and  -log t <= c*r - 1 - log c  tangent at c = det(Sigma_f)^(1/n);",
            "exact at Sigma_N = Sigma_f.  Add the objective constant offset below",
            "to compare with the directly optimized benchmark cost.",
        ])
    return prob
