"""Computable Wasserstein and suboptimality bounds.

Two families are evaluated: the deterministic moment-matching bound, built
layer by layer from a :class:`~mombo.gaussmm.PropagationTrace`, and the
probabilistic bound that applies to Monte Carlo estimates from ``N``
samples with confidence ``1 - delta``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, UndefinedBoundError
from .gaussmm import DiagonalGaussian, PropagationTrace, mm_forward, relu_moments
from .nncore import MlpParams, induced_l1_norm, std_normal_cdf, std_normal_pdf


def g_term(mu_t, sigma_t):
    """``sigma phi(mu/sigma) - mu Phi(-mu/sigma)``, i.e. the integral of the
    matched normal cdf over the negative half-line.  Zero where sigma is 0."""
    mu_t = np.asarray(mu_t, dtype=float)
    sigma_t = np.asarray(sigma_t, dtype=float)
    zero = sigma_t == 0.0
    s = np.where(zero, 1.0, sigma_t)
    g = s * std_normal_pdf(mu_t / s) - mu_t * std_normal_cdf(-mu_t / s)
    # sigma -> 0 limit is max(0, -mu); a matched ReLU mean is never negative
    return np.where(zero, np.maximum(-mu_t, 0.0), np.maximum(g, 0.0))


def relu_mm_w1_bound(belief: DiagonalGaussian) -> float:
    """Upper bound on W1 between ``max(0, X)`` and its moment-matched normal.

    ``belief`` is the (scalar or per-unit) distribution of ``X``; per-unit
    bounds are summed.
    """
    mu, var = belief.mean, belief.var
    mu_t, var_t = relu_moments(mu, var)
    sigma, sigma_t = np.sqrt(var), np.sqrt(var_t)
    per_unit = g_term(mu_t, sigma_t) + np.abs(mu - mu_t) + np.abs(sigma - sigma_t)
    per_unit = np.where(sigma == 0.0, 0.0, per_unit)
    return float(per_unit.sum())


@dataclass
class BoundReport:
    g_values: list[float] = field(default_factory=list)  # one per hidden layer
    c_values: list[float] = field(default_factory=list)  # one per hidden layer
    norms: list[float] = field(default_factory=list)  # one per layer
    g_max_unit: list[float] = field(default_factory=list)
    mm_w1_bound: float = 0.0
    mm_subopt: float | None = None
    mc_w1_bound: float | None = None
    mc_subopt: float | None = None
    horizon: int | None = None
    gamma: float | None = None
    rmax: float | None = None
    delta: float | None = None
    n_samples: int | None = None

    @property
    def g_exceeds_one(self) -> bool:
        """Flag for layers whose per-unit G went above 1 (recorded, not clamped)."""
        return any(g > 1.0 for g in self.g_max_unit)

    def csv_rows(self) -> list[dict]:
        rows = []
        for i, norm in enumerate(self.norms):
            hidden = i < len(self.g_values)
            rows.append(
                {
                    "row": f"layer{i + 1}",
                    "norm": norm,
                    "G": self.g_values[i] if hidden else "",
                    "C": self.c_values[i] if hidden else "",
                    "mm_w1_bound": "",
                    "mm_subopt": "",
                    "mc_w1_bound": "",
                    "mc_subopt": "",
                }
            )
        rows.append(
            {
                "row": "total",
                "norm": math.prod(self.norms) if self.norms else "",
                "G": sum(self.g_values),
                "C": sum(self.c_values),
                "mm_w1_bound": self.mm_w1_bound,
                "mm_subopt": "" if self.mm_subopt is None else self.mm_subopt,
                "mc_w1_bound": "" if self.mc_w1_bound is None else self.mc_w1_bound,
                "mc_subopt": "" if self.mc_subopt is None else self.mc_subopt,
            }
        )
        return rows


def layer_norms(params: MlpParams) -> list[float]:
    return [induced_l1_norm(w) for w in params.weights]


def mlp_mm_w1_bound(params: MlpParams, trace: PropagationTrace) -> BoundReport:
    """Layer-wise moment-matching W1 bound for a single (unbatched) input.

    For every hidden layer ``l`` the ReLU stage contributes ``G_l + C_l``
    where ``C_l`` compares the pre-activation moments with the matched
    post-activation moments.  Each contribution is amplified by the norms
    of all later layers.
    """
    n_layers = params.n_layers
    if len(trace) != 2 * n_layers - 1:
        raise DimensionError(f"trace has {len(trace)} stages, expected {2 * n_layers - 1}")
    norms = layer_norms(params)
    report = BoundReport(norms=norms)
    total = 0.0
    for l in range(n_layers - 1):
        kind_pre, pre = trace.stages[2 * l]
        kind_post, post = trace.stages[2 * l + 1]
        if kind_pre != "linear" or kind_post != "relu" or pre.dim != params.weights[l].shape[0]:
            raise DimensionError(f"trace stage {2 * l} does not belong to these parameters")
        if pre.mean.ndim != 1:
            raise DimensionError("bound evaluation expects an unbatched trace")
        g_units = g_term(post.mean, post.std)
        g = float(g_units.sum())
        c = float(np.abs(pre.mean - post.mean).sum() + np.abs(pre.std - post.std).sum())
        report.g_values.append(g)
        report.c_values.append(c)
        report.g_max_unit.append(float(g_units.max()))
        total += (g + c) * math.prod(norms[l + 1 :])
    report.mm_w1_bound = total
    return report


def reward_scale(rmax: float, gamma: float) -> float:
    """``Rmax^2 / (1 - gamma)^2``: the squared range of a discounted return."""
    return rmax**2 / (1.0 - gamma) ** 2


def gaussian_fit_w1_bound(n: int, delta: float, rmax: float, gamma: float) -> float:
    """Radius that the Gaussian-fit W1 error stays below with prob. ``1 - delta``."""
    if n < 2:
        raise UndefinedBoundError("the sampling bound is not defined for fewer than two samples")
    if not 0.0 < delta < 1.0:
        raise UndefinedBoundError("delta must lie in (0, 1)")
    if not 0.0 < gamma < 1.0:
        raise UndefinedBoundError("gamma must lie in (0, 1)")
    if rmax <= 0:
        raise UndefinedBoundError("rmax must be positive")
    return math.sqrt(-8.0 * math.log(delta / 4.0) * reward_scale(rmax, gamma) / (n // 2))


def sampling_w1_bound(norms, n: int, delta: float, rmax: float, gamma: float) -> float:
    return math.prod(norms) * gaussian_fit_w1_bound(n, delta, rmax, gamma)


def suboptimality_bounds(
    report: BoundReport,
    horizon: int,
    n: int | None = None,
    delta: float | None = None,
    rmax: float | None = None,
    gamma: float | None = None,
) -> BoundReport:
    """Fill in the suboptimality totals (``2H`` times each W1 bound).

    The sampling-based entries are only computed when ``n``, ``delta``,
    ``rmax`` and ``gamma`` are all supplied.
    """
    if horizon < 1:
        raise UndefinedBoundError("horizon must be >= 1")
    report.horizon = horizon
    report.mm_subopt = 2.0 * horizon * report.mm_w1_bound
    if None not in (n, delta, rmax, gamma):
        report.mc_w1_bound = sampling_w1_bound(report.norms, n, delta, rmax, gamma)
        report.mc_subopt = 2.0 * horizon * report.mc_w1_bound
        report.n_samples, report.delta, report.rmax, report.gamma = n, delta, rmax, gamma
    return report


def bound_report(
    params: MlpParams,
    belief: DiagonalGaussian,
    horizon: int,
    n: int | None = None,
    delta: float | None = None,
    rmax: float | None = None,
    gamma: float | None = None,
) -> BoundReport:
    _, trace = mm_forward(params, belief)
    return suboptimality_bounds(mlp_mm_w1_bound(params, trace), horizon, n, delta, rmax, gamma)
