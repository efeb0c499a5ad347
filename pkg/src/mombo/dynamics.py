"""Heteroscedastic Gaussian ensemble over state deltas and rewards."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import ConfigError, TrainingError
from .gaussmm import DiagonalGaussian
from .nncore import (
    AdamState,
    MlpParams,
    adam_step,
    backward,
    forward,
    forward_cache,
    init_mlp,
    load_checkpoint,
    rng_stream,
    save_checkpoint,
)
from .transitions import TransitionBatch

log = logging.getLogger(__name__)

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass
class EnsembleConfig:
    n_ensemble: int = 5
    n_elite: int = 3
    hidden: tuple[int, ...] = (64, 64)
    lr: float = 1e-3
    batch_size: int = 256
    weight_decay: tuple[float, ...] = (2.5e-5, 5e-5, 7.5e-5)
    patience: int = 5
    max_epochs: int = 200
    max_val: int = 1000
    val_fraction: float = 0.1
    min_logvar: float = -10.0
    max_logvar: float = 0.5

    def __post_init__(self) -> None:
        self.hidden = tuple(self.hidden)
        self.weight_decay = tuple(self.weight_decay)
        if not 1 <= self.n_elite <= self.n_ensemble:
            raise ConfigError("need 1 <= n_elite <= n_ensemble")
        if len(self.weight_decay) != len(self.hidden) + 1:
            raise ConfigError("weight_decay needs one entry per layer")


def _softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def soft_clamp(x, lo: float, hi: float) -> tuple[np.ndarray, np.ndarray]:
    """Smooth clamp into ``(lo, hi)``; returns value and derivative."""
    upper = hi - _softplus(hi - x)
    out = lo + _softplus(upper - lo)
    grad = _sigmoid(hi - x) * _sigmoid(upper - lo)
    # the two softplus layers overshoot each end by up to log1p(exp(lo - hi))
    inside = (out > lo) & (out < hi)
    return np.clip(out, lo, hi), np.where(inside, grad, 0.0)


def gaussian_nll(y, mean, logvar) -> np.ndarray:
    """Per-dimension negative log-likelihood of ``y`` under ``N(mean, exp(logvar))``."""
    return 0.5 * ((y - mean) ** 2 * np.exp(-logvar) + logvar + LOG_2PI)


@dataclass
class Normalizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, x: np.ndarray) -> Normalizer:
        return cls(x.mean(axis=0), np.maximum(x.std(axis=0), 1e-6))

    def __call__(self, x):
        return (x - self.mean) / self.std


@dataclass
class EnsembleModel:
    members: list[MlpParams]
    elites: list[int]
    in_norm: Normalizer
    out_norm: Normalizer
    state_dim: int
    action_dim: int
    config: EnsembleConfig = field(default_factory=EnsembleConfig)
    val_nll: list[float] = field(default_factory=list)

    @property
    def out_dim(self) -> int:
        return self.state_dim + 1

    def raw_outputs(self, member: int, s: np.ndarray, a: np.ndarray, cache: bool = False):
        x = self.in_norm(np.concatenate([s, a], axis=-1))
        net = self.members[member]
        c = forward_cache(net, x) if cache else None
        out = c[-1] if cache else forward(net, x)
        d = self.out_dim
        mean = out[..., :d] * self.out_norm.std + self.out_norm.mean
        logvar, dclamp = soft_clamp(out[..., d:] + 2.0 * np.log(self.out_norm.std),
                                    self.config.min_logvar, self.config.max_logvar)
        return mean, logvar, dclamp, x, c


def predict(model: EnsembleModel, member: int, s: np.ndarray, a: np.ndarray) -> DiagonalGaussian:
    """Predictive belief over ``(s', r)`` from elite ``member``."""
    if member not in model.elites:
        raise ValueError(f"member {member} is not an elite (elites: {model.elites})")
    s = np.asarray(s, dtype=float)
    mean, logvar, *_ = model.raw_outputs(member, s, np.asarray(a, dtype=float))
    mean = mean.copy()
    mean[..., : model.state_dim] += s
    return DiagonalGaussian(mean, np.exp(logvar))


def _targets(data: TransitionBatch) -> np.ndarray:
    return np.concatenate([data.s_next - data.s, data.r[:, None]], axis=1)


def _member_loss_and_grad(model: EnsembleModel, member: int, s, a, y, with_grad: bool = True):
    mean, logvar, dclamp, x, cache = model.raw_outputs(member, s, a, cache=with_grad)
    nll = gaussian_nll(y, mean, logvar)
    loss = float(nll.sum(axis=1).mean())
    if not with_grad:
        return loss, None
    n = len(y)
    inv_var = np.exp(-logvar)
    d_mean = -(y - mean) * inv_var * model.out_norm.std / n
    d_logvar = 0.5 * (1.0 - (y - mean) ** 2 * inv_var) * dclamp / n
    grads = backward(model.members[member], x, np.concatenate([d_mean, d_logvar], axis=1), cache=cache)
    return loss, grads


def validation_nll(model: EnsembleModel, member: int, data: TransitionBatch) -> float:
    loss, _ = _member_loss_and_grad(model, member, data.s, data.a, _targets(data), with_grad=False)
    return loss


def select_elites(val_losses, n_elite: int) -> list[int]:
    """Lowest validation losses first; ties go to the lower member index."""
    order = sorted(range(len(val_losses)), key=lambda i: (val_losses[i], i))
    return sorted(order[:n_elite])


def train_ensemble(data: TransitionBatch, cfg: EnsembleConfig | None = None, seed: int = 0) -> EnsembleModel:
    """Maximum-likelihood fit of every member with early stopping on held-out NLL."""
    cfg = cfg or EnsembleConfig()
    if len(data) < 2:
        raise ConfigError("need at least two transitions (one for validation)")
    rng = rng_stream(seed, 11)
    perm = rng.permutation(len(data))
    n_val = int(min(cfg.max_val, max(1, round(cfg.val_fraction * len(data)))))
    val, train = data[perm[:n_val]], data[perm[n_val:]]
    state_dim, action_dim = data.s.shape[1], data.a.shape[1]
    y_train = _targets(train)
    model = EnsembleModel(
        members=[],
        elites=[],
        in_norm=Normalizer.fit(np.concatenate([train.s, train.a], axis=1)),
        out_norm=Normalizer.fit(y_train),
        state_dim=state_dim,
        action_dim=action_dim,
        config=cfg,
    )
    sizes = [state_dim + action_dim, *cfg.hidden, 2 * (state_dim + 1)]
    for m in range(cfg.n_ensemble):
        model.members.append(init_mlp(sizes, rng_stream(seed, 100 + m)))
    best_losses = []
    for m in range(cfg.n_ensemble):
        mrng = rng_stream(seed, 200 + m)
        opt = AdamState.for_params(model.members[m], lr=cfg.lr)
        best, best_params, stale = np.inf, model.members[m].copy(), 0
        for epoch in range(cfg.max_epochs):
            order = mrng.permutation(len(train))
            for start in range(0, len(train), cfg.batch_size):
                idx = order[start : start + cfg.batch_size]
                loss, grads = _member_loss_and_grad(model, m, train.s[idx], train.a[idx], y_train[idx])
                if not np.isfinite(loss):
                    raise TrainingError(f"ensemble member {m} diverged (non-finite NLL)")
                adam_step(opt, grads, model.members[m], weight_decay=cfg.weight_decay)
            v = validation_nll(model, m, val)
            if not np.isfinite(v):
                raise TrainingError(f"ensemble member {m} diverged (non-finite validation NLL)")
            if not np.isfinite(best) or v < best - 1e-6 * max(1.0, abs(best)):
                best, best_params, stale = v, model.members[m].copy(), 0
            else:
                stale += 1
                if stale >= cfg.patience:
                    break
        model.members[m] = best_params
        best_losses.append(float(best))
        log.info("member %d: best validation NLL %.4f after %d epochs", m, best, epoch + 1)
    model.val_nll = best_losses
    model.elites = select_elites(best_losses, cfg.n_elite)
    return model


def sample_transitions(
    model: EnsembleModel,
    s: np.ndarray,
    a: np.ndarray,
    rng: np.random.Generator,
    terminal: Callable[[np.ndarray], np.ndarray] | None = None,
) -> TransitionBatch:
    """One model step per row from a uniformly chosen elite.

    The stored variances and ``_mean`` fields are that elite's predictive
    moments; ``s_next`` and ``r`` are a draw from them.
    """
    d = model.state_dim
    elites = np.asarray(model.elites)
    choice = elites[rng.integers(0, len(elites), size=len(s))]
    mean = np.empty((len(s), d + 1))
    var = np.empty((len(s), d + 1))
    for e in elites:
        rows = choice == e
        if rows.any():
            belief = predict(model, int(e), s[rows], a[rows])
            mean[rows], var[rows] = belief.mean, belief.var
    draw = mean + np.sqrt(var) * rng.standard_normal(mean.shape)
    s_next = draw[:, :d]
    done = terminal(s_next) if terminal is not None else np.zeros(len(s), dtype=bool)
    return TransitionBatch(s, a, draw[:, d], s_next, done.astype(float), var[:, :d], var[:, d],
                           mean[:, :d], mean[:, d])


def rollout(
    model: EnsembleModel,
    policy: Callable[[np.ndarray, np.random.Generator], np.ndarray],
    starts: np.ndarray,
    k: int,
    rng: np.random.Generator,
    terminal: Callable[[np.ndarray], np.ndarray] | None = None,
) -> TransitionBatch:
    """Branch ``k`` model steps from every start state; terminated branches stop early."""
    if k < 1:
        raise ConfigError("rollout length must be >= 1")
    s = np.asarray(starts, dtype=float)
    out = []
    for _ in range(k):
        if len(s) == 0:
            break
        step = sample_transitions(model, s, policy(s, rng), rng, terminal)
        out.append(step)
        s = step.s_next[step.done == 0]
    return TransitionBatch.concat(out)


# -- persistence ---------------------------------------------------------------


def save_ensemble(model: EnsembleModel, path: str | Path) -> None:
    """Members go to ``path`` (one container section each); metadata to ``path.json``."""
    path = Path(path)
    save_checkpoint(path, model.members)
    sidecar = {
        "elites": model.elites,
        "state_dim": model.state_dim,
        "action_dim": model.action_dim,
        "in_mean": model.in_norm.mean.tolist(),
        "in_std": model.in_norm.std.tolist(),
        "out_mean": model.out_norm.mean.tolist(),
        "out_std": model.out_norm.std.tolist(),
        "val_nll": model.val_nll,
        "config": asdict(model.config),
    }
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar, indent=2) + "\n", encoding="utf-8")


def load_ensemble(path: str | Path) -> EnsembleModel:
    path = Path(path)
    side = json.loads(path.with_suffix(path.suffix + ".json").read_text(encoding="utf-8"))
    return EnsembleModel(
        members=load_checkpoint(path),
        elites=list(side["elites"]),
        in_norm=Normalizer(np.array(side["in_mean"]), np.array(side["in_std"])),
        out_norm=Normalizer(np.array(side["out_mean"]), np.array(side["out_std"])),
        state_dim=side["state_dim"],
        action_dim=side["action_dim"],
        config=EnsembleConfig(**side["config"]),
        val_nll=list(side["val_nll"]),
    )
