"""Monte Carlo reference for Gaussian inputs pushed through an MLP."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InsufficientSamplesError
from .gaussmm import DiagonalGaussian
from .nncore import MlpParams, forward

CHUNK = 100_000


@dataclass
class SampleBatch:
    samples: np.ndarray  # (n, out_dim)
    seed: int | None = None

    def __post_init__(self) -> None:
        self.samples = np.asarray(self.samples, dtype=float)
        if self.samples.ndim == 1:
            self.samples = self.samples[:, None]
        if self.samples.shape[0] < 1:
            raise InsufficientSamplesError("a sample batch needs at least one row")

    @property
    def n(self) -> int:
        return self.samples.shape[0]


@dataclass
class EmpiricalMoments:
    mean: np.ndarray
    var: np.ndarray | None  # None when n == 1
    n: int

    @property
    def std_err(self) -> np.ndarray:
        if self.var is None:
            raise InsufficientSamplesError("standard error needs n >= 2")
        return np.sqrt(self.var / self.n)


def sample_belief(belief: DiagonalGaussian, n: int, rng: np.random.Generator) -> np.ndarray:
    return belief.mean + belief.std * rng.standard_normal((n, belief.dim))


def mc_forward(
    params: MlpParams,
    belief: DiagonalGaussian,
    n: int,
    rng: np.random.Generator,
    seed: int | None = None,
) -> SampleBatch:
    """Push ``n`` i.i.d. draws of ``belief`` through the network (chunked)."""
    if n < 1:
        raise InsufficientSamplesError("n must be >= 1")
    out = np.empty((n, params.out_dim))
    for start in range(0, n, CHUNK):
        stop = min(n, start + CHUNK)
        out[start:stop] = forward(params, sample_belief(belief, stop - start, rng))
    return SampleBatch(out, seed)


def empirical_moments(batch: SampleBatch | np.ndarray, require_var: bool = False) -> EmpiricalMoments:
    samples = batch.samples if isinstance(batch, SampleBatch) else np.asarray(batch, dtype=float)
    if samples.ndim == 1:
        samples = samples[:, None]
    n = samples.shape[0]
    if n < 1:
        raise InsufficientSamplesError("no samples")
    if n < 2:
        if require_var:
            raise InsufficientSamplesError("the unbiased variance needs at least two samples")
        return EmpiricalMoments(samples.mean(axis=0), None, n)
    return EmpiricalMoments(samples.mean(axis=0), samples.var(axis=0, ddof=1), n)


def refit_redraw(samples: np.ndarray, rng: np.random.Generator) -> float:
    """One draw from the Gaussian fitted to ``samples`` (needs >= 2 samples)."""
    mom = empirical_moments(np.asarray(samples).reshape(-1, 1), require_var=True)
    return float(mom.mean[0] + np.sqrt(mom.var[0]) * rng.standard_normal())


def _quantiles(sorted_x: np.ndarray, n: int) -> np.ndarray:
    m = sorted_x.size
    if m == n:
        return sorted_x
    grid = (np.arange(n) + 0.5) / n
    return np.interp(grid, (np.arange(m) + 0.5) / m, sorted_x)


def empirical_w1(a: np.ndarray, b: np.ndarray) -> float:
    """W1 between two 1-d empirical measures via order statistics.

    Sets of different size are compared on a common quantile grid of
    ``max(len(a), len(b))`` points.
    """
    a = np.sort(np.ravel(np.asarray(a, dtype=float)))
    b = np.sort(np.ravel(np.asarray(b, dtype=float)))
    if a.size == 0 or b.size == 0:
        raise InsufficientSamplesError("W1 needs non-empty sample sets")
    n = max(a.size, b.size)
    return float(np.mean(np.abs(_quantiles(a, n) - _quantiles(b, n))))


def gaussian_w1_upper(a: DiagonalGaussian, b: DiagonalGaussian) -> float:
    """``|mu_a - mu_b| + |sigma_a - sigma_b|`` for scalar beliefs."""
    return float(np.abs(a.mean - b.mean).sum() + np.abs(a.std - b.std).sum())


def hoeffding_tail(eps: float, n: int, rmax: float, gamma: float) -> float:
    """Two-sided Hoeffding bound for the mean of ``n`` samples in ``[0, rmax/(1-gamma)]``."""
    return float(2.0 * np.exp(-2.0 * eps**2 * n * (1.0 - gamma) ** 2 / rmax**2))
