"""SAC-style actor-critic with pessimistic Bellman targets.

Three target constructions are supported:

* ``mopo``   -- sample target minus ``beta`` times the largest predictive
  standard deviation of the next state;
* ``mobile`` -- sample target minus ``beta`` times the empirical standard
  deviation of ``n`` Monte Carlo bootstrap values;
* ``mombo``  -- lower confidence bound of the moment-matched bootstrap
  distribution, computed deterministically.

All targets use the deterministic (non-soft) backup and the minimum over
two target critics.
"""

from __future__ import annotations

import logging
import math
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .dynamics import EnsembleModel, rollout
from .envs import ToyEnv, normalized_return, run_episodes
from .errors import ConfigError, TrainingError
from .gaussmm import DiagonalGaussian, concat_beliefs, mm_forward
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
    soft_update,
)
from .transitions import TransitionBatch

log = logging.getLogger(__name__)

STRATEGIES = ("mopo", "mobile", "mombo")
LOG_STD_MIN, LOG_STD_MAX = -20.0, 2.0
HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


@dataclass
class PenaltyConfig:
    strategy: str = "mombo"
    beta: float = 2.0
    n_samples: int = 10
    gamma: float = 0.99
    rmax: float = 1.0
    horizon: int = 100
    delta: float = 0.1

    def __post_init__(self) -> None:
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}; choose from {', '.join(STRATEGIES)}")
        if self.beta < 0:
            raise ConfigError("beta must be >= 0")
        if self.strategy == "mobile" and self.n_samples < 2:
            raise ConfigError("mobile needs n_samples >= 2")
        if not 0.0 < self.gamma < 1.0 or not 0.0 < self.delta < 1.0:
            raise ConfigError("gamma and delta must lie in (0, 1)")
        if self.rmax <= 0 or self.horizon < 1:
            raise ConfigError("rmax must be positive and horizon >= 1")


@dataclass
class SacConfig:
    hidden_actor: tuple[int, ...] = (64, 64)
    hidden_critic: tuple[int, ...] = (64, 64)
    lr_actor: float = 1e-4
    lr_critic: float = 3e-4
    lr_alpha: float = 1e-4
    tau: float = 0.005
    batch_size: int = 256
    real_ratio: float = 0.05
    init_alpha: float = 0.2
    fixed_alpha: float | None = None
    actor_cosine: bool = True

    def __post_init__(self) -> None:
        self.hidden_actor = tuple(self.hidden_actor)
        self.hidden_critic = tuple(self.hidden_critic)
        if not 0.0 < self.tau <= 1.0:
            raise ConfigError("tau must lie in (0, 1]")
        if not 0.0 <= self.real_ratio <= 1.0:
            raise ConfigError("real_ratio must lie in [0, 1]")


@dataclass
class TrainConfig:
    steps: int = 100_000
    rollout_freq: int = 1000
    rollout_batch: int = 1000
    rollout_length: int = 5
    retain: int = 5
    eval_every: int = 5000
    eval_episodes: int = 10
    stop_at_normalized: float | None = None


@dataclass
class SacState:
    actor: MlpParams
    critics: list[MlpParams]
    target_critics: list[MlpParams]
    actor_opt: AdamState
    critic_opts: list[AdamState]
    log_alpha: np.ndarray
    alpha_opt: AdamState
    target_entropy: float
    config: SacConfig

    @property
    def alpha(self) -> float:
        if self.config.fixed_alpha is not None:
            return self.config.fixed_alpha
        return float(np.exp(self.log_alpha[0]))

    @property
    def action_dim(self) -> int:
        return self.actor.out_dim // 2


def init_sac(state_dim: int, action_dim: int, cfg: SacConfig | None = None, seed: int = 0) -> SacState:
    cfg = cfg or SacConfig()
    actor = init_mlp([state_dim, *cfg.hidden_actor, 2 * action_dim], rng_stream(seed, 300))
    critics = [init_mlp([state_dim + action_dim, *cfg.hidden_critic, 1], rng_stream(seed, 301 + i)) for i in range(2)]
    log_alpha = np.array([math.log(cfg.init_alpha)])
    return SacState(
        actor=actor,
        critics=critics,
        target_critics=[c.copy() for c in critics],
        actor_opt=AdamState.for_params(actor, lr=cfg.lr_actor),
        critic_opts=[AdamState.for_params(c, lr=cfg.lr_critic) for c in critics],
        log_alpha=log_alpha,
        alpha_opt=AdamState([np.zeros(1)], [np.zeros(1)], lr=cfg.lr_alpha),
        target_entropy=-float(action_dim),
        config=cfg,
    )


# -- policy --------------------------------------------------------------------


def _split_head(out: np.ndarray, action_dim: int):
    mean = out[..., :action_dim]
    raw = out[..., action_dim:]
    return mean, np.clip(raw, LOG_STD_MIN, LOG_STD_MAX), raw


def policy_action(
    actor: MlpParams,
    s: np.ndarray,
    rng: np.random.Generator | None = None,
    eps: np.ndarray | None = None,
) -> np.ndarray:
    """Squashed-Gaussian action; the mean action ``tanh(mu(s))`` when no noise source is given."""
    d = actor.out_dim // 2
    mean, log_std, _ = _split_head(forward(actor, s), d)
    if eps is None and rng is None:
        return np.tanh(mean)
    if eps is None:
        eps = rng.standard_normal(mean.shape)
    return np.tanh(mean + np.exp(log_std) * eps)


def log1m_tanh_sq(u):
    """``log(1 - tanh(u)^2)`` without cancellation."""
    return 2.0 * (math.log(2.0) - u - np.logaddexp(0.0, -2.0 * u))


def squashed_log_prob(mean, log_std, u):
    """Log-density of ``a = tanh(u)`` for ``u ~ N(mean, exp(log_std)^2)``, summed over action dims."""
    z = (u - mean) / np.exp(log_std)
    return np.sum(-0.5 * z * z - log_std - HALF_LOG_2PI - log1m_tanh_sq(u), axis=-1)


# -- Bellman targets -----------------------------------------------------------


def _min_q(critics: list[MlpParams], s: np.ndarray, a: np.ndarray) -> np.ndarray:
    x = np.concatenate([s, a], axis=-1)
    return np.min([forward(c, x)[..., 0] for c in critics], axis=0)


def sample_bellman(
    batch: TransitionBatch,
    target_critics: list[MlpParams],
    actor: MlpParams,
    gamma: float,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """``r + gamma (1 - done) min_i Q_i(s', a')`` on the realised next state."""
    a_next = policy_action(actor, batch.s_next, rng)
    return batch.r + gamma * (1.0 - batch.done) * _min_q(target_critics, batch.s_next, a_next)


def penalty_mopo(batch: TransitionBatch) -> np.ndarray:
    """Largest per-dimension predictive standard deviation of the next state."""
    return np.sqrt(batch.var_s_next).max(axis=-1)


def penalty_mobile(
    batch: TransitionBatch,
    target_critics: list[MlpParams],
    actor: MlpParams,
    gamma: float,
    n: int,
    rng: np.random.Generator | None,
) -> np.ndarray:
    """Empirical std of ``n`` bootstrap values with ``s'`` drawn from the stored Gaussian.

    One policy noise vector per transition is shared by its ``n`` draws, so
    that zero next-state variance yields identical draws and zero penalty.
    ``rng=None`` uses the mean action and (for non-zero variance) a fixed
    generator, which makes the penalty reproducible.
    """
    if n < 2:
        raise ConfigError("the MOBILE penalty needs n >= 2 samples")
    if rng is None:
        rng = rng_stream(0, 0)
        eps = None
    else:
        eps = rng.standard_normal((len(batch), actor.out_dim // 2))
    b, d = batch.s_next_mean.shape
    z = rng.standard_normal((n, b, d))
    s_draw = (batch.s_next_mean + np.sqrt(batch.var_s_next) * z).reshape(n * b, d)
    eps_all = None if eps is None else np.broadcast_to(eps, (n, *eps.shape)).reshape(n * b, -1)
    a_draw = policy_action(actor, s_draw, eps=eps_all) if eps_all is not None else policy_action(actor, s_draw)
    values = gamma * (1.0 - batch.done) * _min_q(target_critics, s_draw, a_draw).reshape(n, b)
    # shifting by the first draw makes identical draws give exactly zero
    return (values - values[0]).std(axis=0, ddof=1)


@dataclass
class MomboParts:
    """Per-critic moment-matched bootstrap moments, shape ``(critics, batch)``."""

    mean: np.ndarray
    std: np.ndarray


def mombo_moments(batch: TransitionBatch, target_critics: list[MlpParams], actor: MlpParams) -> MomboParts:
    """Propagate ``N(s'_mean, var_s')`` joined with the point action at ``s'_mean``."""
    a_next = policy_action(actor, batch.s_next_mean)
    belief = concat_beliefs(DiagonalGaussian(batch.s_next_mean, batch.var_s_next), DiagonalGaussian.point(a_next))
    means, stds = [], []
    for c in target_critics:
        out, _ = mm_forward(c, belief)
        means.append(out.mean[..., 0])
        stds.append(np.sqrt(out.var[..., 0]))
    return MomboParts(np.array(means), np.array(stds))


def target_mombo(
    batch: TransitionBatch,
    target_critics: list[MlpParams],
    actor: MlpParams,
    gamma: float,
    beta: float,
    parts: MomboParts | None = None,
) -> np.ndarray:
    """``r + (1 - done) min_i (gamma mu_i - beta gamma sigma_i) - beta sqrt(var_r)``."""
    if parts is None:
        parts = mombo_moments(batch, target_critics, actor)
    lcb = (gamma * parts.mean - beta * gamma * parts.std).min(axis=0)
    return batch.r_mean + (1.0 - batch.done) * lcb - beta * np.sqrt(batch.var_r)


def pessimistic_target(
    batch: TransitionBatch,
    state: SacState,
    cfg: PenaltyConfig,
    rng: np.random.Generator | None,
) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(target, U)`` where ``U`` is the amount subtracted for pessimism."""
    tc, actor = state.target_critics, state.actor
    if cfg.strategy == "mombo":
        parts = mombo_moments(batch, tc, actor)
        y = target_mombo(batch, tc, actor, cfg.gamma, cfg.beta, parts)
        y0 = target_mombo(batch, tc, actor, cfg.gamma, 0.0, parts)
        return y, y0 - y
    base = sample_bellman(batch, tc, actor, cfg.gamma, rng)
    if cfg.strategy == "mopo":
        u = cfg.beta * penalty_mopo(batch)
    else:
        u = cfg.beta * penalty_mobile(batch, tc, actor, cfg.gamma, cfg.n_samples, rng)
    return base - u, u


# -- updates -------------------------------------------------------------------


def critic_update(
    batch: TransitionBatch,
    state: SacState,
    cfg: PenaltyConfig,
    rng: np.random.Generator | None,
) -> dict:
    """Regress both critics onto the shared pessimistic target, then Polyak-average."""
    y, u = pessimistic_target(batch, state, cfg, rng)
    y = np.array(y, copy=True)  # treated as a constant
    x = np.concatenate([batch.s, batch.a], axis=1)
    n = len(batch)
    losses = []
    for critic, opt in zip(state.critics, state.critic_opts):
        cache = forward_cache(critic, x)
        resid = cache[-1][:, 0] - y
        loss = float(np.mean(resid**2))
        if not np.isfinite(loss):
            raise TrainingError("critic loss is not finite")
        grads = backward(critic, x, (2.0 / n) * resid[:, None], cache=cache)
        adam_step(opt, grads, critic)
        losses.append(loss)
    for target, critic in zip(state.target_critics, state.critics):
        soft_update(target, critic, state.config.tau)
    return {"loss_critic": float(np.mean(losses)), "mean_penalty": float(np.mean(u)), "mean_target": float(np.mean(y))}


def actor_loss_and_grad(state: SacState, s: np.ndarray, eps: np.ndarray):
    """Reparameterised SAC loss ``mean(alpha log pi - min Q)`` and its actor gradient.

    ``eps`` is the standard-normal noise of the action sample, so the loss is
    a deterministic function of the actor parameters.  Returns
    ``(loss, grads, log_prob)``.
    """
    n, d = len(s), state.action_dim
    cache = forward_cache(state.actor, s)
    mean, log_std, raw = _split_head(cache[-1], d)
    std = np.exp(log_std)
    u = mean + std * eps
    a = np.tanh(u)
    logp = squashed_log_prob(mean, log_std, u)
    alpha = state.alpha

    x = np.concatenate([s, a], axis=1)
    qs, dq = [], []
    for c in state.critics:
        cc = forward_cache(c, x)
        qs.append(cc[-1][:, 0])
        dq.append(backward(c, x, np.ones((n, 1)), cache=cc).input[:, -d:])
    pick = np.argmin(qs, axis=0)
    q = np.choose(pick, qs)
    dq_da = np.where((pick == 0)[:, None], dq[0], dq[1])
    loss = float(np.mean(alpha * logp - q))

    # d/du of -log(1 - tanh(u)^2) is 2 tanh(u)
    d_u = (-dq_da * (1.0 - a * a) + alpha * 2.0 * a) / n
    in_range = (raw >= LOG_STD_MIN) & (raw <= LOG_STD_MAX)
    d_log_std = (-alpha / n + d_u * std * eps) * in_range
    grads = backward(state.actor, s, np.concatenate([d_u, d_log_std], axis=1), cache=cache)
    return loss, grads, logp


def actor_update(batch: TransitionBatch, state: SacState, rng: np.random.Generator) -> dict:
    """Reparameterised SAC policy step and (optionally) entropy-coefficient step."""
    if len(batch) == 0:
        raise ConfigError("empty batch")
    eps = rng.standard_normal((len(batch), state.action_dim))
    loss, grads, logp = actor_loss_and_grad(state, batch.s, eps)
    if not np.isfinite(loss):
        raise TrainingError("actor loss is not finite")
    adam_step(state.actor_opt, grads, state.actor)

    if state.config.fixed_alpha is None:
        g = -np.mean(logp + state.target_entropy)
        adam_step(state.alpha_opt, [np.array([g])], [state.log_alpha])
    return {"loss_actor": loss, "alpha": state.alpha, "entropy": float(-np.mean(logp))}


# -- training loop -------------------------------------------------------------


@dataclass
class CurvePoint:
    step: int
    eval_return_mean: float
    eval_return_std: float
    normalized_return: float
    loss_critic: float
    loss_actor: float
    mean_penalty: float


@dataclass
class TrainResult:
    state: SacState
    curve: list[CurvePoint] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def aulc(self) -> float:
        return float(np.mean([p.normalized_return for p in self.curve])) if self.curve else float("nan")

    @property
    def final_normalized(self) -> float:
        return self.curve[-1].normalized_return if self.curve else float("nan")


def evaluate_policy(env: ToyEnv, actor: MlpParams, episodes: int, rng: np.random.Generator) -> np.ndarray:
    returns, _ = run_episodes(env, lambda s: policy_action(actor, s), episodes, rng)
    return returns


def mixed_batch(
    real: TransitionBatch,
    synthetic: TransitionBatch | None,
    batch_size: int,
    real_ratio: float,
    rng: np.random.Generator,
) -> TransitionBatch:
    n_real = batch_size if synthetic is None or len(synthetic) == 0 else int(round(real_ratio * batch_size))
    parts = []
    if n_real > 0:
        parts.append(real.sample(n_real, rng))
    if n_real < batch_size:
        parts.append(synthetic.sample(batch_size - n_real, rng))
    return TransitionBatch.concat(parts)


def train(
    data: TransitionBatch,
    env: ToyEnv,
    model: EnsembleModel | None,
    penalty: PenaltyConfig | None = None,
    sac: SacConfig | None = None,
    schedule: TrainConfig | None = None,
    seed: int = 0,
    callback: Callable[[CurvePoint], None] | None = None,
) -> TrainResult:
    """Dyna-style loop: refresh model rollouts, then alternate critic and actor steps.

    ``model=None`` or ``real_ratio=1`` trains on the offline data only.
    """
    penalty = penalty or PenaltyConfig()
    sac = sac or SacConfig()
    schedule = schedule or TrainConfig()
    state = init_sac(data.s.shape[1], data.a.shape[1], sac, seed)
    rng = rng_stream(seed, 400)
    eval_rng = rng_stream(seed, 401)
    buffer: deque[TransitionBatch] = deque(maxlen=schedule.retain)
    use_model = model is not None and sac.real_ratio < 1.0
    synthetic: TransitionBatch | None = None
    result = TrainResult(state)
    t0 = time.perf_counter()
    recent: dict[str, list[float]] = {"loss_critic": [], "loss_actor": [], "mean_penalty": []}

    def policy_sampler(s, r):
        return policy_action(state.actor, s, r)

    for step in range(1, schedule.steps + 1):
        if use_model and (step - 1) % schedule.rollout_freq == 0:
            starts = data.s[rng.integers(0, len(data), size=schedule.rollout_batch)]
            buffer.append(rollout(model, policy_sampler, starts, schedule.rollout_length, rng, env.terminal))
            synthetic = TransitionBatch.concat(list(buffer))
        batch = mixed_batch(data, synthetic, sac.batch_size, sac.real_ratio, rng)
        c_info = critic_update(batch, state, penalty, rng)
        if sac.actor_cosine:
            state.actor_opt.lr = sac.lr_actor * 0.5 * (1.0 + math.cos(math.pi * (step - 1) / schedule.steps))
        a_info = actor_update(batch, state, rng)
        for key, info in (("loss_critic", c_info), ("mean_penalty", c_info), ("loss_actor", a_info)):
            recent[key].append(info[key])
        if step % schedule.eval_every == 0 or step == schedule.steps:
            returns = evaluate_policy(env, state.actor, schedule.eval_episodes, eval_rng)
            point = CurvePoint(
                step=step,
                eval_return_mean=float(returns.mean()),
                eval_return_std=float(returns.std()),
                normalized_return=float(normalized_return(env, returns.mean())),
                loss_critic=float(np.mean(recent["loss_critic"])),
                loss_actor=float(np.mean(recent["loss_actor"])),
                mean_penalty=float(np.mean(recent["mean_penalty"])),
            )
            recent = {k: [] for k in recent}
            result.curve.append(point)
            log.info("step %d: return %.2f (normalized %.1f)", step, point.eval_return_mean, point.normalized_return)
            if callback is not None:
                callback(point)
            if schedule.stop_at_normalized is not None and point.normalized_return >= schedule.stop_at_normalized:
                break
    result.seconds = time.perf_counter() - t0
    return result


def save_policy(state: SacState, path) -> None:
    """Actor, both critics and both target critics, in that order."""
    save_checkpoint(path, [state.actor, *state.critics, *state.target_critics])


def load_policy(path) -> tuple[MlpParams, list[MlpParams]]:
    """Return ``(actor, critics)`` from a file written by :func:`save_policy`."""
    nets = load_checkpoint(path)
    if len(nets) != 5:
        raise ConfigError(f"{path}: expected 5 networks (actor, 2 critics, 2 targets), found {len(nets)}")
    return nets[0], nets[1:3]
