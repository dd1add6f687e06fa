import numpy as np
import pytest

from flowsteer import autodiff as ad
from flowsteer import distributions as dist


def test_gaussian_sampler_clt_bound():
    g = dist.GaussianSpec(np.zeros(2), np.eye(2))
    draws = g.sample(10_000, dist.rng_stream(123, "eval"))
    assert np.all(np.abs(draws.mean(axis=0)) < 0.05)  # 3/sqrt(M) ~ 0.03


def test_single_component_gmm_equals_gaussian_sampler():
    g = dist.GaussianSpec([1.0, -2.0], np.diag([0.5, 2.0]))
    gm = dist.GmmSpec([1.0], [g])
    a = g.sample(1000, dist.rng_stream(5, "eval"))
    b = gm.sample(1000, dist.rng_stream(5, "eval"))
    assert np.allclose(a.mean(axis=0), b.mean(axis=0), atol=0.2)
    assert np.allclose(np.cov(a.T), np.cov(b.T), atol=0.3)


def test_empirical_single_point():
    e = dist.EmpiricalSet(np.array([[1.0, 2.0, 3.0]]))
    out = dist.sample(e, 50, dist.rng_stream(0, "batch"))
    assert np.all(out.samples == np.array([1.0, 2.0, 3.0]))


def test_standard_normal_log_pdf_at_origin():
    g = dist.GaussianSpec(np.zeros(2), np.eye(2))
    assert np.isclose(float(g.log_pdf(np.zeros(2))), -np.log(2 * np.pi))


def test_shifted_normal_log_pdf_at_mode():
    g = dist.GaussianSpec([1.0, 0.0], np.eye(2))
    assert np.isclose(float(g.log_pdf(np.array([1.0, 0.0]))), -np.log(2 * np.pi))


def test_far_separated_gmm_log_pdf():
    a = dist.GaussianSpec([0.0, 0.0], np.eye(2))
    b = dist.GaussianSpec([100.0, 0.0], np.eye(2))
    gm = dist.GmmSpec([0.5, 0.5], [a, b])
    expected = np.log(0.5) + float(a.log_pdf(np.zeros(2)))
    assert np.isclose(float(gm.log_pdf(np.zeros(2))), expected)


def test_log_pdf_batched_and_on_tape():
    g = dist.GaussianSpec([0.5, -0.5], [[2.0, 0.3], [0.3, 1.0]])
    rng = dist.rng_stream(9, "eval")
    X = rng.normal(size=(7, 2))
    lp = g.log_pdf(X)
    assert lp.shape == (7,)
    t = ad.Tape()
    node = g.log_pdf(t.leaf(X))
    assert np.allclose(ad.value_of(node), lp)
    grad = ad.backward(ad.tsum(node))
    # d log p / dx = -Sigma^{-1} (x - mu)
    expected = -(X - g.mean) @ g._prec
    assert np.allclose(grad[t.leaves[0]], expected)


def test_gaussian_kl_identical_is_zero():
    g = dist.GaussianSpec([1.0, 2.0], [[1.5, 0.2], [0.2, 0.7]])
    assert dist.gaussian_kl(g, g) == pytest.approx(0.0, abs=1e-14)


def test_gaussian_kl_mean_shift():
    a = dist.GaussianSpec([1.0, 0.0], np.eye(2))
    b = dist.GaussianSpec([0.0, 0.0], np.eye(2))
    assert dist.gaussian_kl(a, b) == pytest.approx(0.5)


def test_gaussian_kl_scaled_covariance():
    a = dist.GaussianSpec(np.zeros(2), 2 * np.eye(2))
    b = dist.GaussianSpec(np.zeros(2), np.eye(2))
    assert dist.gaussian_kl(a, b) == pytest.approx(1.0 - np.log(2.0))


def _random_gaussian(rng, n):
    A = rng.normal(size=(n, n))
    return dist.GaussianSpec(rng.normal(size=n), A @ A.T + n * np.eye(n))


def test_gaussian_kl_nonnegative_on_random_pairs():
    rng = np.random.default_rng(21)
    for _ in range(20):
        a = _random_gaussian(rng, 3)
        b = _random_gaussian(rng, 3)
        assert dist.gaussian_kl(a, b) > 0.0
        assert dist.gaussian_kl(a, a) == pytest.approx(0.0, abs=1e-12)


def test_gaussian_kl_matches_monte_carlo():
    rng = np.random.default_rng(4)
    a = _random_gaussian(rng, 3)
    b = _random_gaussian(rng, 3)
    draws = a.sample(100_000, dist.rng_stream(77, "eval"))
    ratio = np.asarray(a.log_pdf(draws)) - np.asarray(b.log_pdf(draws))
    se = ratio.std(ddof=1) / np.sqrt(len(ratio))
    assert abs(ratio.mean() - dist.gaussian_kl(a, b)) < 3 * se


def test_gmm_log_pdf_integrates_to_one_on_grid():
    gm = dist.GmmSpec(
        [0.3, 0.7],
        [dist.GaussianSpec([-1.0, 0.5], 0.5 * np.eye(2)),
         dist.GaussianSpec([1.5, -0.5], [[0.8, 0.2], [0.2, 0.6]])],
    )
    lim = 6.5
    xs = np.linspace(-lim - 1.5, lim + 1.5, 501)
    X, Y = np.meshgrid(xs, xs)
    pts = np.column_stack([X.ravel(), Y.ravel()])
    p = np.exp(np.asarray(gm.log_pdf(pts))).reshape(X.shape)
    mass = np.trapezoid(np.trapezoid(p, xs, axis=1), xs)
    assert abs(mass - 1.0) < 1e-3


def test_gaussian_sampler_covariance_frobenius():
    cov = np.array([[2.0, 0.4, 0.0], [0.4, 1.0, -0.2], [0.0, -0.2, 0.5]])
    g = dist.GaussianSpec(np.zeros(3), cov)
    draws = g.sample(100_000, dist.rng_stream(31, "eval"))
    emp = np.cov(draws.T)
    assert np.linalg.norm(emp - cov) < 0.05 * np.linalg.norm(cov)


def test_empirical_target_rejected():
    e = dist.EmpiricalSet(np.zeros((5, 2)))
    with pytest.raises(ad.ContractError, match="log_pdf"):
        dist.require_target(e)


def test_rng_streams_are_independent_of_purpose():
    a = dist.rng_stream(900, "init").standard_normal(4)
    b = dist.rng_stream(900, "batch").standard_normal(4)
    a2 = dist.rng_stream(900, "init").standard_normal(4)
    assert not np.allclose(a, b)
    assert np.array_equal(a, a2)


def test_load_empirical_csv(tmp_path):
    path = tmp_path / "cloud.csv"
    np.savetxt(path, np.arange(12.0).reshape(4, 3), delimiter=",")
    e = dist.load_empirical_csv(path)
    assert e.samples.shape == (4, 3)
    assert e.dim == 3


def test_invalid_specs_rejected():
    with pytest.raises(ValueError):
        dist.GaussianSpec(np.zeros(2), np.array([[1.0, 0.5], [0.4, 1.0]]))
    with pytest.raises(ValueError):
        dist.GaussianSpec(np.zeros(2), -np.eye(2))
    with pytest.raises(ValueError):
        dist.GmmSpec([0.6, 0.6], [dist.GaussianSpec(np.zeros(1), np.eye(1))] * 2)
