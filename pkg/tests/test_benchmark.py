import numpy as np
import pytest
from scipy.optimize import brentq

from flowsteer import benchmark as bm
from flowsteer.distributions import GaussianSpec, gaussian_kl, rng_stream
from flowsteer.systems import double_integrator_2d


def test_propagate_open_loop_powers():
    s = double_integrator_2d(dt=0.1, horizon=6)
    mu0 = np.array([0.0, 0.0, 5.0, 8.0])
    S0 = np.diag([1.0, 1.0, 0.2, 0.2])
    traj = bm.propagate(s.A, s.B(0), bm.AffinePolicy.zero(4, 2, 6), mu0, S0)
    for k in range(7):
        Ak = np.linalg.matrix_power(s.A, k)
        assert np.allclose(traj.means[k], Ak @ mu0)
        assert np.allclose(traj.covariances[k], Ak @ S0 @ Ak.T)


def test_propagate_example_terminal_mean():
    s = double_integrator_2d(dt=0.1, horizon=30)
    traj = bm.propagate(s.A, s.B(0), bm.AffinePolicy.zero(4, 2, 30),
                        [0.0, 0.0, 5.0, 8.0], np.diag([1.0, 1.0, 0.2, 0.2]))
    # positions gain N * dt * velocity over the horizon
    assert np.allclose(traj.means[-1], [15.0, 24.0, 5.0, 8.0])


def test_propagate_matches_monte_carlo_closed_loop():
    rng = np.random.default_rng(2)
    n, m, N = 3, 2, 5
    A = np.eye(n) + 0.1 * rng.normal(size=(n, n))
    B = rng.normal(size=(n, m))
    policy = bm.AffinePolicy([0.2 * rng.normal(size=(m, n)) for _ in range(N)],
                             [rng.normal(size=m) for _ in range(N)])
    mu0 = rng.normal(size=n)
    S0 = np.eye(n)
    traj = bm.propagate(A, B, policy, mu0, S0)

    M = 100_000
    draws = rng_stream(3, "eval")
    X = mu0 + draws.standard_normal((M, n))
    mus = [X.mean(axis=0)]
    for k in range(N):
        mu_k = traj.means[k]
        U = (X - mu_k) @ policy.gains[k].T + policy.feedforwards[k]
        X = X @ A.T + U @ B.T
    emp_mean = X.mean(axis=0)
    emp_cov = np.cov(X.T)
    se_mean = X.std(axis=0, ddof=1) / np.sqrt(M)
    assert np.all(np.abs(emp_mean - traj.means[-1]) < 3 * se_mean + 1e-9)
    # covariance entries: compare with a conservative 3-SE bound
    for i in range(n):
        for j in range(n):
            prod = (X[:, i] - emp_mean[i]) * (X[:, j] - emp_mean[j])
            se = prod.std(ddof=1) / np.sqrt(M)
            assert abs(emp_cov[i, j] - traj.covariances[-1][i, j]) < 3.5 * se


def test_analytic_cost_zero_policy_is_kl_only():
    s = double_integrator_2d(dt=0.1, horizon=4)
    init = GaussianSpec(np.zeros(4), np.eye(4))
    target = GaussianSpec(np.ones(4), 0.5 * np.eye(4))
    pol = bm.AffinePolicy.zero(4, 2, 4)
    traj = bm.propagate(s.A, s.B(0), pol, init.mean, init.cov)
    total, effort, kl = bm.analytic_cost(traj, pol, 7.0, target)
    assert effort == 0.0
    assert total == pytest.approx(7.0 * kl)
    assert kl == pytest.approx(
        gaussian_kl(GaussianSpec(traj.means[-1], traj.covariances[-1]), target))


def test_analytic_cost_pure_feedforward_effort():
    s = double_integrator_2d(dt=0.1, horizon=3)
    vs = [np.array([1.0, -2.0]), np.array([0.5, 0.0]), np.array([3.0, 1.0])]
    pol = bm.AffinePolicy([np.zeros((2, 4))] * 3, vs)
    init = GaussianSpec(np.zeros(4), np.eye(4))
    target = GaussianSpec(np.zeros(4), np.eye(4))
    traj = bm.propagate(s.A, s.B(0), pol, init.mean, init.cov)
    _, effort, _ = bm.analytic_cost(traj, pol, 1.0, target)
    assert effort == pytest.approx(sum(float(v @ v) for v in vs))


def test_analytic_cost_matches_monte_carlo():
    rng = np.random.default_rng(7)
    n, m, N = 2, 2, 4
    A = np.eye(n) + 0.15 * rng.normal(size=(n, n))
    B = rng.normal(size=(n, m))
    policy = bm.AffinePolicy([0.3 * rng.normal(size=(m, n)) for _ in range(N)],
                             [0.5 * rng.normal(size=m) for _ in range(N)])
    init = GaussianSpec(rng.normal(size=n), np.eye(n))
    target = GaussianSpec(rng.normal(size=n), np.eye(n) * 1.5)
    lam = 3.0
    traj = bm.propagate(A, B, policy, init.mean, init.cov)
    total, effort, kl = bm.analytic_cost(traj, policy, lam, target)

    M = 100_000
    X = init.sample(M, rng_stream(11, "eval"))
    eff_samples = np.zeros(M)
    for k in range(N):
        U = (X - traj.means[k]) @ policy.gains[k].T + policy.feedforwards[k]
        eff_samples += (U * U).sum(axis=1)
        X = X @ A.T + U @ B.T
    se = eff_samples.std(ddof=1) / np.sqrt(M)
    assert abs(eff_samples.mean() - effort) < 3 * se


def test_cost_node_agrees_with_analytic_cost():
    rng = np.random.default_rng(9)
    n, m, N = 3, 1, 5
    A = np.eye(n) + 0.1 * rng.normal(size=(n, n))
    B = rng.normal(size=(n, m))
    Ks = [0.2 * rng.normal(size=(m, n)) for _ in range(N)]
    vs = [rng.normal(size=m) for _ in range(N)]
    policy = bm.AffinePolicy(Ks, vs)
    init = GaussianSpec(rng.normal(size=n), np.eye(n))
    target = GaussianSpec(rng.normal(size=n), 2.0 * np.eye(n))
    node_val = float(np.asarray(
        bm._cost_node(A, B, Ks, vs, init, target, 5.0)))
    traj = bm.propagate(A, B, policy, init.mean, init.cov)
    total, _, _ = bm.analytic_cost(traj, policy, 5.0, target)
    assert node_val == pytest.approx(total, rel=1e-12)


def test_optimize_affine_already_at_target():
    init = GaussianSpec(np.zeros(2), np.eye(2))
    res = bm.optimize_affine(np.eye(2), np.eye(2), init, init, lam=1e4,
                             horizon=1, iterations=300, starts=2)
    assert res.cost < 1e-6
    assert np.max(np.abs(res.policy.gains[0])) < 1e-3
    assert np.max(np.abs(res.policy.feedforwards[0])) < 1e-3


def test_optimize_affine_scalar_closed_form():
    # A = B = 1, N = 1: minimize K^2 + v^2
    #   + lam/2 [ ((1+K)^2 + (mu0 + v - muf)^2) / Sf - log (1+K)^2 + log Sf - 1 ]
    lam, Sf, mu0, muf = 4.0, 0.5, 1.0, 3.0
    init = GaussianSpec([mu0], [[1.0]])
    target = GaussianSpec([muf], [[Sf]])

    def dK(K):
        return 2 * K + lam * ((1 + K) / Sf - 1.0 / (1 + K))

    K_star = brentq(dK, -0.99, 5.0, xtol=1e-12)
    v_star = lam * (muf - mu0) / Sf / (2 + lam / Sf)

    res = bm.optimize_affine(np.eye(1), np.eye(1), init, target, lam=lam,
                             horizon=1, iterations=8000, lr=5e-3, starts=3)
    assert res.policy.gains[0][0, 0] == pytest.approx(K_star, abs=1e-4)
    assert res.policy.feedforwards[0][0] == pytest.approx(v_star, abs=1e-4)


def test_optimize_affine_accepted_costs_nonincreasing():
    init = GaussianSpec([0.0, 1.0], np.eye(2))
    target = GaussianSpec([1.0, 0.0], 0.7 * np.eye(2))
    res = bm.optimize_affine(np.eye(2) * 1.05, np.eye(2), init, target, lam=10.0,
                             horizon=3, iterations=500, starts=2)
    hist = res.cost_history
    assert all(b <= a for a, b in zip(hist, hist[1:]))


def test_export_sdp_census_n1_m1():
    init = GaussianSpec([0.5], [[1.0]])
    target = GaussianSpec([1.0], [[0.8]])
    prob = bm.export_sdp(np.eye(1), np.eye(1), init, target, lam=2.0, horizon=1)
    # hand enumeration: U0, Y0, v0, s0, Sigma1, mu1, q, Z11, r, t  -> 10 vars
    assert prob.n_vars == 10
    # blocks: step LMI (2), v epigraph (2), mean epigraph (2), det-root (2),
    # reciprocal (2), diagonal rows: 2 equalities * 2 + 1 (t <= Z11) = -5
    assert sorted(prob.block_dims) == sorted([2, 2, 2, 2, 2, -5])
    assert prob.objective.shape == (10,)


def test_export_sdp_example1_block_census():
    s = double_integrator_2d(dt=0.1, horizon=30)
    init = GaussianSpec([0.0, 0.0, 5.0, 8.0], np.diag([1.0, 1.0, 0.2, 0.2]))
    target = GaussianSpec([0.0, 0.0, 10.0, 0.0], 0.4 * np.eye(4))
    prob = bm.export_sdp(s.A, s.B(0), init, target, lam=60.0, horizon=30)
    n, m, N = 4, 2, 30
    dims = prob.block_dims
    assert dims.count(n + m) == N            # relaxation Schur LMIs
    assert dims.count(m + 1) == N            # ||v||^2 epigraphs
    assert dims.count(n + 1) == 1            # terminal mean epigraph
    assert dims.count(2 * n) == 1            # det-root LMI
    assert dims.count(2) == 3 + 1            # geometric-mean tower + reciprocal
    n_eq = N * (n + n * (n + 1) // 2)
    assert dims.count(-2 * n_eq) == 1
    n_vars = N * (m * n + m * (m + 1) // 2 + m + 1) + N * (n * (n + 1) // 2 + n)
    n_vars += 1 + n * (n + 1) // 2 + 1 + 1 + 2  # q, Z, r, t, gm tower
    assert prob.n_vars == n_vars


def test_export_sdp_roundtrip(tmp_path):
    init = GaussianSpec([0.5, -0.5], np.eye(2))
    target = GaussianSpec([0.0, 0.0], 0.5 * np.eye(2))
    prob = bm.export_sdp(np.eye(2) * 1.02, np.array([[0.1], [0.0]]), init, target,
                         lam=60.0, horizon=4)
    path = tmp_path / "cs.dat-s"
    prob.write(path)
    back = bm.SdpProblem.read(path)
    assert back.n_vars == prob.n_vars
    assert back.block_dims == prob.block_dims
    assert np.array_equal(back.objective, prob.objective)
    assert back.canonical_entries() == prob.canonical_entries()
    assert back.objective_constant == prob.objective_constant


def test_export_sdp_objective_exact_at_target_moments():
    # plugging the target moments into the objective's linear form must give
    # lam * KL = 0 shifted by the documented constant
    init = GaussianSpec([0.0], [[1.0]])
    target = GaussianSpec([0.0], [[0.7]])
    lam = 6.0
    prob = bm.export_sdp(np.eye(1), np.eye(1), init, target, lam=lam, horizon=1)
    x = np.zeros(prob.n_vars)
    names = prob.var_names
    c_root = 0.7
    x[names["Sigma1[0,0]"] - 1] = 0.7
    x[names["mu1[0]"] - 1] = 0.0
    x[names["q_mean"] - 1] = 0.0
    x[names["Z[0,0]"] - 1] = 0.7
    x[names["t_det"] - 1] = c_root
    x[names["r_recip"] - 1] = 1.0 / c_root
    val = float(prob.objective @ x) + prob.objective_constant
    assert val == pytest.approx(0.0, abs=1e-12)
