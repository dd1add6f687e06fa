"""Boundary distributions: sampling-capable sources and density-evaluable targets.

A Gaussian or mixture fills both roles; an empirical sample set can only
act as a source, because maximum-likelihood training needs an explicit
density on the target side.  ``log_pdf`` methods accept tape tensors as
well as raw arrays, so the same code path serves training and plotting.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from scipy.linalg import cho_solve, cholesky

from . import autodiff as ad

_LOG_2PI = float(np.log(2.0 * np.pi))

# one Philox stream per purpose so e.g. changing the batch size cannot
# perturb weight initialization
_STREAMS = {"init": 0, "batch": 1, "eval": 2, "metrics": 3, "benchmark": 4}


def rng_stream(seed: int, purpose: str) -> np.random.Generator:
    """Counter-based generator for one purpose, derived from the run seed."""
    try:
        key = _STREAMS[purpose]
    except KeyError:
        raise ValueError(f"unknown rng purpose {purpose!r}; one of {sorted(_STREAMS)}")
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(key,))
    return np.random.Generator(np.random.Philox(ss))


class GaussianSpec:
    """Multivariate normal with a cached Cholesky factor."""

    def __init__(self, mean, cov):
        self.mean = np.asarray(mean, dtype=np.float64).reshape(-1)
        cov = np.asarray(cov, dtype=np.float64)
        n = self.mean.shape[0]
        if cov.shape != (n, n):
            raise ValueError(f"covariance shape {cov.shape} does not match mean dim {n}")
        if np.max(np.abs(cov - cov.T)) > 1e-12:
            raise ValueError("covariance must be symmetric to 1e-12")
        if not (np.all(np.isfinite(self.mean)) and np.all(np.isfinite(cov))):
            raise ValueError("non-finite Gaussian parameters")
        self.cov = 0.5 * (cov + cov.T)
        try:
            self.chol = cholesky(self.cov, lower=True)
        except np.linalg.LinAlgError as e:
            raise ValueError("covariance must be strictly positive definite") from e
        self._prec = cho_solve((self.chol, True), np.eye(n))
        self._log_norm = 0.5 * (n * _LOG_2PI + 2.0 * np.log(np.diag(self.chol)).sum())

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def sample(self, count: int, rng: np.random.Generator) -> np.ndarray:
        if count < 1:
            raise ValueError("count must be >= 1")
        z = rng.standard_normal((count, self.dim))
        return self.mean + z @ self.chol.T

    def log_pdf(self, x):
        d = ad.add_bias(x, -self.mean)
        q = ad.sum_last(ad.mul(ad.matmul(d, self._prec), d))
        return ad.add_scalar(ad.scale(q, -0.5), -self._log_norm)

    def __repr__(self):
        return f"GaussianSpec(dim={self.dim})"


class GmmSpec:
    """Finite Gaussian mixture; log-density via stabilized log-sum-exp."""

    def __init__(self, weights, components):
        self.weights = np.asarray(weights, dtype=np.float64).reshape(-1)
        self.components = list(components)
        if len(self.components) < 1:
            raise ValueError("mixture needs at least one component")
        if len(self.weights) != len(self.components):
            raise ValueError("weights and components disagree in length")
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > 1e-12:
            raise ValueError("weights must be a simplex vector (sum 1 +- 1e-12)")
        dims = {c.dim for c in self.components}
        if len(dims) != 1:
            raise ValueError("mixture components must share a dimension")

    @property
    def dim(self) -> int:
        return self.components[0].dim

    def sample(self, count: int, rng: np.random.Generator) -> np.ndarray:
        if count < 1:
            raise ValueError("count must be >= 1")
        idx = rng.choice(len(self.components), size=count, p=self.weights)
        z = rng.standard_normal((count, self.dim))
        means = np.stack([c.mean for c in self.components])[idx]
        chols = np.stack([c.chol for c in self.components])[idx]
        return means + np.einsum("bij,bj->bi", chols, z)

    def log_pdf(self, x):
        logw = np.log(np.maximum(self.weights, 1e-300))
        cols = [ad.add_scalar(c.log_pdf(x), lw) for c, lw in zip(self.components, logw)]
        return ad.logsumexp_last(ad.stack_last(cols))


class EmpiricalSet:
    """A finite sample set; a source role only (no density available)."""

    def __init__(self, samples, source_tag: str = "samples"):
        self.samples = np.asarray(samples, dtype=np.float64)
        if self.samples.ndim == 1:
            self.samples = self.samples[None, :]
        if self.samples.shape[0] < 1:
            raise ValueError("empirical set needs at least one row")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("empirical set rows must be finite")
        self.source_tag = source_tag

    @property
    def dim(self) -> int:
        return self.samples.shape[1]

    def sample(self, count: int, rng: np.random.Generator) -> np.ndarray:
        if count < 1:
            raise ValueError("count must be >= 1")
        rows = rng.integers(0, self.samples.shape[0], size=count)
        return self.samples[rows]

    def __repr__(self):
        return f"EmpiricalSet(M={self.samples.shape[0]}, dim={self.dim}, tag={self.source_tag!r})"


def load_empirical_csv(path) -> EmpiricalSet:
    """Load an M x n numeric CSV (no header) as an empirical source."""
    data = np.loadtxt(Path(path), delimiter=",", dtype=np.float64, ndmin=2)
    return EmpiricalSet(data, source_tag=str(path))


def is_source(dist) -> bool:
    return hasattr(dist, "sample")


def is_target(dist) -> bool:
    return hasattr(dist, "log_pdf")


def require_target(dist):
    """Reject sample-only distributions where an explicit density is needed."""
    if not is_target(dist):
        raise ad.ContractError(
            f"{dist!r} exposes no log_pdf: maximum-likelihood training needs an "
            "explicit target density; an empirical sample set can only be a source")
    return dist


def sample(dist, count: int, rng: np.random.Generator) -> EmpiricalSet:
    """Draw i.i.d. samples from any source distribution as an EmpiricalSet."""
    if not is_source(dist):
        raise ad.ContractError(f"{dist!r} is not sampleable")
    return EmpiricalSet(dist.sample(count, rng), source_tag=type(dist).__name__)


def log_pdf(dist, x):
    return require_target(dist).log_pdf(x)


def gaussian_kl(a: GaussianSpec, b: GaussianSpec) -> float:
    """Closed-form KL divergence D(a || b) between Gaussians."""
    if a.dim != b.dim:
        raise ValueError("dimension mismatch")
    n = a.dim
    dmu = b.mean - a.mean
    tr = float(np.trace(b._prec @ a.cov))
    quad = float(dmu @ b._prec @ dmu)
    logdet_a = 2.0 * np.log(np.diag(a.chol)).sum()
    logdet_b = 2.0 * np.log(np.diag(b.chol)).sum()
    return 0.5 * (tr + quad - n + logdet_b - logdet_a)
