import numpy as np
import pytest

from flowsteer import autodiff as ad
from flowsteer import policy as pol
from flowsteer import systems as sysmod
from flowsteer.distributions import rng_stream


def make_stack(widths=(4, 16, 16, 2), horizon=3, alpha=0.9, l_pi=9.0, seed=0):
    budget = pol.LipschitzBudget(alpha, l_pi)
    return pol.PolicyStack.create(widths, horizon, budget, rng_stream(seed, "init"))


def test_paper_widths_accepted():
    make_stack(widths=(4, 64, 64, 64, 64, 2), horizon=1)
    make_stack(widths=(2, 128, 128, 1), horizon=1)


def test_fresh_policy_is_zero_map():
    stack = make_stack()
    rng = np.random.default_rng(2)
    X = rng.normal(size=(10, 4))
    assert np.allclose(ad.value_of(stack.act(0, X)), 0.0)


def test_spectral_normalize_analytic_diag():
    W = np.diag([2.0, 1.0])
    Wn, sigma, _, _ = pol.spectral_normalize(W, iters=50)
    assert np.allclose(Wn, np.diag([1.0, 0.5]))
    assert sigma == pytest.approx(2.0, rel=1e-6)


def test_spectral_normalize_contractive_unchanged():
    W = 0.5 * np.eye(3)
    Wn, sigma, _, _ = pol.spectral_normalize(W, iters=50)
    assert np.array_equal(Wn, W)
    assert sigma == pytest.approx(0.5, rel=1e-6)


def test_spectral_normalize_identity_unchanged():
    Wn, sigma, _, _ = pol.spectral_normalize(np.eye(4), iters=20)
    assert np.array_equal(Wn, np.eye(4))
    assert sigma == pytest.approx(1.0, rel=1e-6)


def test_spectral_normalize_zero_matrix_guard():
    W = np.zeros((3, 2))
    Wn, sigma, _, _ = pol.spectral_normalize(W, iters=5)
    assert np.array_equal(Wn, W)
    assert sigma == 0.0


def test_power_iteration_estimate_close_to_svd():
    rng = np.random.default_rng(8)
    for _ in range(20):
        W = rng.normal(size=(12, 7))
        _, sigma, _, _ = pol.spectral_normalize(W, iters=50)
        assert sigma == pytest.approx(np.linalg.norm(W, 2), rel=1e-3)


def test_all_layers_normalized_after_init():
    stack = make_stack(widths=(4, 32, 32, 2), horizon=4, seed=3)
    for p in stack.policies:
        assert np.all(p.spectral_norms() <= 1.0 + 1e-3)


def test_output_gain_matches_budget():
    stack = make_stack(widths=(4, 8, 2), horizon=1, alpha=0.9, l_pi=9.0, seed=4)
    p = stack.policies[0]
    rng = np.random.default_rng(0)
    p.weights[-1] = rng.normal(size=p.weights[-1].shape) * 0.05
    x = rng.normal(size=4)
    raw = ad.value_of(p.apply(x))
    assert np.allclose(ad.value_of(stack.act(0, x)), 8.1 * raw)


def test_empirical_lipschitz_bound():
    stack = make_stack(widths=(4, 16, 16, 2), horizon=1, alpha=0.9, l_pi=9.0, seed=5)
    p = stack.policies[0]
    rng = np.random.default_rng(1)
    # make the final layer nontrivial, then re-project
    p.weights[-1] = rng.normal(size=p.weights[-1].shape)
    p.normalize(iters=50)
    X = rng.normal(scale=3.0, size=(100_000, 4))
    Y = X + rng.normal(scale=0.5, size=X.shape)
    du = np.linalg.norm(ad.value_of(stack.act(0, X)) - ad.value_of(stack.act(0, Y)), axis=1)
    dx = np.linalg.norm(X - Y, axis=1)
    assert np.max(du / dx) <= 0.9 * 9.0 + 1e-9


def test_budget_feasibility_check():
    s = sysmod.double_integrator_2d(dt=0.1)
    budget = pol.LipschitzBudget.for_system(s, alpha=0.9)
    assert np.allclose(budget.l_pi, 9.0)
    closed = budget.check_feasible(s)
    assert np.all(closed < 1.0)
    with pytest.raises(pol.ConfigError):
        pol.LipschitzBudget.for_system(s, alpha=0.9, l_pi=20.0)


def test_alpha_range_validated():
    with pytest.raises(pol.ConfigError):
        pol.LipschitzBudget(1.2, 9.0)
    with pytest.raises(pol.ConfigError):
        pol.LipschitzBudget(0.0, 9.0)


def test_bound_stack_matches_raw_forward():
    stack = make_stack(widths=(3, 8, 8, 2), horizon=2, seed=6)
    rng = np.random.default_rng(2)
    for p in stack.policies:
        p.weights[-1] = rng.normal(size=p.weights[-1].shape) * 0.1
        p.normalize(iters=50)
    X = rng.normal(size=(5, 3))
    tape = ad.Tape()
    bound = stack.bind(tape)
    for k in range(2):
        assert np.array_equal(ad.value_of(bound.act(k, tape.constant(X))),
                              ad.value_of(stack.act(k, X)))


def test_checkpoint_roundtrip_bitwise(tmp_path):
    stack = make_stack(widths=(4, 16, 2), horizon=3, seed=7)
    rng = np.random.default_rng(3)
    for p in stack.policies:
        p.weights[-1] = rng.normal(size=p.weights[-1].shape) * 0.3
        p.normalize(iters=50)
    path = tmp_path / "stack.fspol"
    stack.save(path)
    loaded = pol.load_stack(path)
    for a, b in zip(stack.parameters(), loaded.parameters()):
        assert np.array_equal(a, b)
    assert loaded.budget.alpha == stack.budget.alpha
    # saving the loaded stack reproduces the file byte for byte
    path2 = tmp_path / "stack2.fspol"
    loaded.save(path2)
    assert path.read_bytes() == path2.read_bytes()


def test_act_index_error():
    stack = make_stack(horizon=2)
    with pytest.raises(IndexError):
        stack.act(2, np.zeros(4))
