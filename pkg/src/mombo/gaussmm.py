"""Deterministic propagation of diagonal Gaussians through ReLU networks.

Only means and variances are carried from layer to layer; every unit is
treated as independent of every other.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError
from .nncore import CDF_CLAMP, MlpParams, std_normal_cdf, std_normal_pdf


@dataclass(frozen=True)
class DiagonalGaussian:
    """Factorised normal belief; ``var`` holds per-dimension variances.

    Arrays may carry leading batch axes, in which case the last axis is the
    feature axis.  Zero variance encodes a point value.
    """

    mean: np.ndarray
    var: np.ndarray

    def __post_init__(self) -> None:
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        var = np.atleast_1d(np.asarray(self.var, dtype=float))
        if var.shape != mean.shape:
            var = np.broadcast_to(var, mean.shape).copy()
        if not (np.isfinite(mean).all() and np.isfinite(var).all()):
            raise ValueError("belief moments must be finite")
        if (var < 0).any():
            raise ValueError("variances must be non-negative")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "var", var)

    @classmethod
    def point(cls, x: np.ndarray) -> DiagonalGaussian:
        x = np.asarray(x, dtype=float)
        return cls(x, np.zeros_like(x))

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(self.var)

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]

    def __len__(self) -> int:
        return self.dim


@dataclass
class PropagationTrace:
    """Beliefs after every stage of :func:`mm_forward`.

    ``stages`` alternates ``("linear", belief)`` and ``("relu", belief)``
    and ends with the final linear stage, so it has ``2L - 1`` entries.
    ``matvecs`` counts matrix products performed (two per layer).
    """

    stages: list[tuple[str, DiagonalGaussian]] = field(default_factory=list)
    matvecs: int = 0

    def __len__(self) -> int:
        return len(self.stages)

    @property
    def pre_activations(self) -> list[DiagonalGaussian]:
        return [b for kind, b in self.stages if kind == "linear"]

    @property
    def post_activations(self) -> list[DiagonalGaussian]:
        return [b for kind, b in self.stages if kind == "relu"]

    def rows(self) -> list[dict]:
        """Flatten to CSV-friendly rows (one per stage and unit)."""
        out = []
        for i, (kind, b) in enumerate(self.stages):
            mean, var = b.mean.reshape(-1, b.dim)[0], b.var.reshape(-1, b.dim)[0]
            for unit, (m, v) in enumerate(zip(mean, var)):
                out.append({"stage": i, "kind": kind, "unit": unit, "mean": m, "var": v})
        return out


def mm_linear(weights: np.ndarray, bias: np.ndarray, belief: DiagonalGaussian) -> DiagonalGaussian:
    """Exact moments of ``W x + b`` for independent Gaussian ``x``."""
    weights = np.asarray(weights, dtype=float)
    if weights.ndim != 2 or weights.shape[1] != belief.dim or np.shape(bias) != (weights.shape[0],):
        raise DimensionError(
            f"cannot apply weights {weights.shape} / bias {np.shape(bias)} to a {belief.dim}-dim belief"
        )
    mean = belief.mean @ weights.T + bias
    var = belief.var @ (weights * weights).T
    return DiagonalGaussian(mean, var)


def relu_moments(mu: np.ndarray, var: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mean and variance of ``max(0, X)`` for ``X ~ N(mu, var)``, elementwise.

    Evaluated in standardised form around one accurate tail probability
    ``Phi(-|alpha|)`` so that ``mean >= mu`` and ``var_out <= var`` hold
    exactly in floating point, not just up to rounding.
    """
    mu = np.asarray(mu, dtype=float)
    var = np.asarray(var, dtype=float)
    sigma = np.sqrt(var)
    degenerate = sigma == 0.0
    safe_sigma = np.where(degenerate, 1.0, sigma)
    a = np.clip(mu / safe_sigma, -CDF_CLAMP, CDF_CLAMP)
    tail = std_normal_cdf(-np.abs(a))
    pdf = std_normal_pdf(a)
    pos = a >= 0.0
    # standardised mean excess over max(0, mu) and standardised variance
    excess = np.where(pos, pdf - a * tail, pdf + a * tail)
    excess = np.maximum(excess, 0.0)
    h_pos = 1.0 + (a * a - 1.0) * tail - a * pdf - excess * excess
    h_neg = (a * a + 1.0) * tail + a * pdf - excess * excess
    h = np.clip(np.where(pos, h_pos, h_neg), 0.0, 1.0)
    m = np.where(pos, mu + sigma * excess, sigma * excess)
    v = var * h
    m = np.where(degenerate, np.maximum(mu, 0.0), m)
    v = np.where(degenerate, 0.0, v)
    return m, v


def mm_relu(belief: DiagonalGaussian) -> DiagonalGaussian:
    m, v = relu_moments(belief.mean, belief.var)
    return DiagonalGaussian(m, v)


def mm_forward(params: MlpParams, belief: DiagonalGaussian) -> tuple[DiagonalGaussian, PropagationTrace]:
    if belief.dim != params.in_dim:
        raise DimensionError(f"belief has {belief.dim} dims, network expects {params.in_dim}")
    trace = PropagationTrace()
    last = params.n_layers - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        belief = mm_linear(w, b, belief)
        trace.matvecs += 2
        trace.stages.append(("linear", belief))
        if i < last:
            belief = mm_relu(belief)
            trace.stages.append(("relu", belief))
    return belief, trace


def concat_beliefs(a: DiagonalGaussian, b: DiagonalGaussian) -> DiagonalGaussian:
    return DiagonalGaussian(
        np.concatenate([a.mean, b.mean], axis=-1),
        np.concatenate([a.var, b.var], axis=-1),
    )
