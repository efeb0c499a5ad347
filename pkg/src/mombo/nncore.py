"""Dense ReLU networks in plain numpy.

Weights are stored as ``(out, in)`` matrices, so a layer computes
``x @ W.T + b``.  Every function accepts either a single input vector of
shape ``(in,)`` or a batch of shape ``(batch, in)``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Sequence

import numpy as np
from scipy import special

from .errors import DimensionError, TrainingError

CHECKPOINT_MAGIC = b"MOMBO-NET"
CHECKPOINT_VERSION = 1
CDF_CLAMP = 38.0
_SUBNORMAL_EDGE = 37.0
# Phi(x) rounds to exactly 1.0 in float64 above this point
_CDF_ONE = 8.3


@dataclass
class MlpParams:
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self) -> None:
        if len(self.weights) == 0 or len(self.weights) != len(self.biases):
            raise DimensionError("an MLP needs at least one layer and one bias per layer")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise DimensionError(f"layer {i}: weight {w.shape} and bias {b.shape} disagree")
            if i > 0 and w.shape[1] != self.weights[i - 1].shape[0]:
                raise DimensionError(
                    f"layer {i} expects {w.shape[1]} inputs but layer {i - 1} "
                    f"produces {self.weights[i - 1].shape[0]}"
                )

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def shapes(self) -> list[tuple[int, int]]:
        return [w.shape for w in self.weights]

    def is_finite(self) -> bool:
        return all(np.isfinite(w).all() and np.isfinite(b).all() for w, b in zip(self.weights, self.biases))

    def copy(self) -> MlpParams:
        return MlpParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def arrays(self) -> list[np.ndarray]:
        return [*self.weights, *self.biases]


@dataclass
class Grads:
    """Gradients of ``upstream . output`` w.r.t. every parameter and the input."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    input: np.ndarray

    def arrays(self) -> list[np.ndarray]:
        return [*self.weights, *self.biases]

    def scaled(self, c: float) -> Grads:
        return Grads([c * w for w in self.weights], [c * b for b in self.biases], c * self.input)

    def __add__(self, other: Grads) -> Grads:
        return Grads(
            [a + b for a, b in zip(self.weights, other.weights)],
            [a + b for a, b in zip(self.biases, other.biases)],
            self.input + other.input,
        )


def rng_stream(seed: int, stream: int = 0) -> np.random.Generator:
    """Independent generator for a ``(seed, stream id)`` pair."""
    seq = np.random.SeedSequence(entropy=int(seed) % 2**64, spawn_key=(int(stream) % 2**64,))
    return np.random.Generator(np.random.PCG64(seq))


def init_mlp(sizes: Sequence[int], rng: np.random.Generator, out_scale: float = 1.0) -> MlpParams:
    """Glorot-uniform weights, zero biases.  ``sizes`` = [in, hidden..., out]."""
    if len(sizes) < 2:
        raise DimensionError("need at least input and output sizes")
    weights, biases = [], []
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-limit, limit, size=(fan_out, fan_in))
        if i == len(sizes) - 2:
            w = w * out_scale
        weights.append(w)
        biases.append(np.zeros(fan_out))
    return MlpParams(weights, biases)


def _check_input(params: MlpParams, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim not in (1, 2) or x.shape[-1] != params.in_dim:
        raise DimensionError(f"input of shape {x.shape} does not match input width {params.in_dim}")
    return x


def forward_cache(params: MlpParams, x: np.ndarray) -> list[np.ndarray]:
    """Return ``[x, z_1, h_1, ..., z_L]`` (pre-activations z, post-ReLU h)."""
    h = _check_input(params, x)
    cache = [h]
    last = params.n_layers - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = h @ w.T + b
        cache.append(z)
        if i < last:
            h = np.maximum(z, 0.0)
            cache.append(h)
    return cache


def forward(params: MlpParams, x: np.ndarray) -> np.ndarray:
    h = _check_input(params, x)
    last = params.n_layers - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = h @ w.T + b
        if i < last:
            h = np.maximum(h, 0.0)
    return h


def backward(
    params: MlpParams,
    x: np.ndarray,
    upstream: np.ndarray,
    cache: list[np.ndarray] | None = None,
) -> Grads:
    """Reverse-mode gradient of ``sum(upstream * forward(x))``.

    For batched input the parameter gradients are summed over the batch and
    the input gradient keeps the batch axis.  ReLU'(0) is taken as 0.
    """
    if cache is None:
        cache = forward_cache(params, x)
    upstream = np.asarray(upstream, dtype=float)
    if upstream.shape != cache[-1].shape:
        raise DimensionError(f"upstream {upstream.shape} does not match output {cache[-1].shape}")
    n = params.n_layers
    gw: list[np.ndarray] = [None] * n  # type: ignore[list-item]
    gb: list[np.ndarray] = [None] * n  # type: ignore[list-item]
    delta = upstream
    for i in range(n - 1, -1, -1):
        h_in = cache[2 * i]
        if delta.ndim == 1:
            gw[i] = np.outer(delta, h_in)
            gb[i] = delta.copy()
        else:
            gw[i] = delta.T @ h_in
            gb[i] = delta.sum(axis=0)
        delta = delta @ params.weights[i]
        if i > 0:
            delta = delta * (cache[2 * i - 1] > 0.0)
    return Grads(gw, gb, delta)


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: MlpParams, lr: float = 3e-4, **kw) -> AdamState:
        arrays = params.arrays()
        return cls([np.zeros_like(a) for a in arrays], [np.zeros_like(a) for a in arrays], lr=lr, **kw)


def adam_step(
    state: AdamState,
    grads: Grads | Sequence[np.ndarray],
    params: MlpParams | Sequence[np.ndarray],
    weight_decay: Sequence[float] | None = None,
) -> MlpParams | Sequence[np.ndarray]:
    """One bias-corrected Adam update; mutates and returns ``params``.

    ``params`` may also be a plain list of arrays (updated in place).
    ``weight_decay`` optionally adds ``wd_l * W_l`` to each weight gradient.
    """
    garrays = grads.arrays() if isinstance(grads, Grads) else list(grads)
    targets = params.arrays() if isinstance(params, MlpParams) else list(params)
    n = params.n_layers if isinstance(params, MlpParams) else len(targets)
    for i, g in enumerate(garrays):
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient in layer {i % n}")
    if weight_decay is not None and isinstance(params, MlpParams):
        garrays = [g + weight_decay[i] * params.weights[i] if i < n else g for i, g in enumerate(garrays)]
    state.step += 1
    c1 = 1.0 - state.beta1**state.step
    c2 = 1.0 - state.beta2**state.step
    for p, g, m, v in zip(targets, garrays, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


def soft_update(target: MlpParams, source: MlpParams, tau: float) -> None:
    for t, s in zip(target.arrays(), source.arrays()):
        t *= 1.0 - tau
        t += tau * s


def induced_l1_norm(a: np.ndarray) -> float:
    """Operator norm ``max_x |Ax|_1 / |x|_1``: the largest absolute column sum."""
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.size == 0:
        raise DimensionError("induced norm needs a non-empty matrix")
    return float(np.abs(a).sum(axis=0).max())


def std_normal_pdf(x):
    x = np.asarray(x, dtype=float)
    x2 = x * x
    # exact 0 instead of subnormal results (slow on x86) beyond |x| = 37
    return np.where(x2 > _SUBNORMAL_EDGE**2, 0.0, np.exp(-0.5 * np.minimum(x2, _SUBNORMAL_EDGE**2))) / np.sqrt(2.0 * np.pi)


def std_normal_cdf(x):
    x = np.clip(np.asarray(x, dtype=float), -CDF_CLAMP, CDF_CLAMP)
    out = np.where(x > _CDF_ONE, 1.0, 0.0)
    inner = (x >= -_SUBNORMAL_EDGE) & (x <= _CDF_ONE)
    out[inner] = 0.5 * special.erfc(-x[inner] / np.sqrt(2.0))
    return out[()] if out.ndim == 0 else out


# -- checkpoint container ------------------------------------------------------


def _write_section(fh: BinaryIO, params: MlpParams) -> None:
    fh.write(CHECKPOINT_MAGIC)
    fh.write(struct.pack("<II", CHECKPOINT_VERSION, params.n_layers))
    for out_dim, in_dim in params.shapes:
        fh.write(struct.pack("<II", out_dim, in_dim))
    for w, b in zip(params.weights, params.biases):
        fh.write(np.ascontiguousarray(w, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(b, dtype="<f8").tobytes())


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise ValueError("truncated checkpoint")
    return data


def _read_section(fh: BinaryIO) -> MlpParams | None:
    magic = fh.read(len(CHECKPOINT_MAGIC))
    if not magic:
        return None
    if magic != CHECKPOINT_MAGIC:
        raise ValueError("not a MOMBO-NET checkpoint")
    version, n_layers = struct.unpack("<II", _read_exact(fh, 8))
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    shapes = [struct.unpack("<II", _read_exact(fh, 8)) for _ in range(n_layers)]
    weights, biases = [], []
    for out_dim, in_dim in shapes:
        w = np.frombuffer(_read_exact(fh, 8 * out_dim * in_dim), dtype="<f8").reshape(out_dim, in_dim)
        b = np.frombuffer(_read_exact(fh, 8 * out_dim), dtype="<f8")
        weights.append(w.astype(float))
        biases.append(b.astype(float))
    return MlpParams(weights, biases)


def save_checkpoint(path: str | Path, nets: MlpParams | Sequence[MlpParams]) -> None:
    """Write one container section per network, back to back."""
    if isinstance(nets, MlpParams):
        nets = [nets]
    with open(path, "wb") as fh:
        for net in nets:
            _write_section(fh, net)


def load_checkpoint(path: str | Path) -> list[MlpParams]:
    nets = []
    with open(path, "rb") as fh:
        while (net := _read_section(fh)) is not None:
            nets.append(net)
    if not nets:
        raise ValueError(f"{path}: empty checkpoint")
    return nets
