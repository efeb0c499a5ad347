"""Toy continuous-control tasks, behaviour-policy datasets, and their file format."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import ConfigError
from .nncore import rng_stream
from .transitions import TransitionBatch

BEHAVIOUR_NOISE = {"medium": 0.3, "expert": 0.05}


@dataclass(frozen=True)
class ToyEnv:
    """A deterministic task whose dynamics act on batches of states.

    ``dynamics(s, a)`` and ``reward(s, a, s_next)`` take ``(batch, dim)``
    arrays.  Rewards lie in ``[0, rmax]``.
    """

    name: str
    state_dim: int
    action_dim: int
    horizon: int
    dynamics: Callable[[np.ndarray, np.ndarray], np.ndarray]
    reward: Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]
    terminal: Callable[[np.ndarray], np.ndarray]
    initial_state: Callable[[np.random.Generator, int], np.ndarray]
    controller: Callable[[np.ndarray], np.ndarray]
    r_rand: float
    r_exp: float
    rmax: float = 1.0
    action_low: float = -1.0
    action_high: float = 1.0
    meta: dict = field(default_factory=dict)

    def step(self, s: np.ndarray, a: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        a = np.clip(a, self.action_low, self.action_high)
        s_next = self.dynamics(s, a)
        return s_next, self.reward(s, a, s_next), self.terminal(s_next)


# -- linereach ---------------------------------------------------------------


def _linereach_dynamics(s, a):
    pos, vel = s[:, 0], s[:, 1]
    return np.stack([pos + 0.1 * vel, vel + 0.1 * a[:, 0] - 0.01 * vel], axis=1)


def _linereach_reward(s, a, s_next):
    return 1.0 - np.minimum(1.0, np.abs(s_next[:, 0] - 1.0))


def _linereach_terminal(s):
    return np.abs(s[:, 0]) > 3.0


def _linereach_init(rng, n):
    return np.stack([rng.uniform(0.0, 0.5, n), np.zeros(n)], axis=1)


def _linereach_pd(s):
    return np.clip(10.0 * (1.0 - s[:, :1]) - 6.0 * s[:, 1:2], -1.0, 1.0)


# -- pendulite ---------------------------------------------------------------


def _wrap(theta):
    return (theta + np.pi) % (2.0 * np.pi) - np.pi


def _pendulite_dynamics(s, a):
    theta, omega = s[:, 0], s[:, 1]
    omega_next = omega + 0.1 * (a[:, 0] + 0.5 * np.sin(theta)) - 0.01 * omega
    return np.stack([_wrap(theta + 0.1 * omega), omega_next], axis=1)


def _pendulite_reward(s, a, s_next):
    return 0.5 * (1.0 + np.cos(s_next[:, 0]))


def _pendulite_terminal(s):
    return np.zeros(len(s), dtype=bool)


def _pendulite_init(rng, n):
    return np.stack([rng.uniform(-1.0, 1.0, n), np.zeros(n)], axis=1)


def _pendulite_pd(s):
    return np.clip(-3.0 * s[:, :1] - 2.0 * s[:, 1:2], -1.0, 1.0)


# Reference returns: mean over 200 episodes of reference_return(..., seed=0).
_REFERENCE = {
    "linereach": (27.18942762862167, 93.01999764065675),
    "pendulite": (52.02268577828175, 99.26771251820239),
}


def _build(name: str, r_rand: float, r_exp: float) -> ToyEnv:
    if name == "linereach":
        return ToyEnv("linereach", 2, 1, 100, _linereach_dynamics, _linereach_reward, _linereach_terminal,
                      _linereach_init, _linereach_pd, r_rand, r_exp)
    return ToyEnv("pendulite", 2, 1, 100, _pendulite_dynamics, _pendulite_reward, _pendulite_terminal,
                  _pendulite_init, _pendulite_pd, r_rand, r_exp)


ENV_NAMES = tuple(_REFERENCE)


def make_env(name: str) -> ToyEnv:
    if name not in _REFERENCE:
        raise ConfigError(f"unknown environment {name!r}; valid names: {', '.join(ENV_NAMES)}")
    return _build(name, *_REFERENCE[name])


# -- behaviour policies --------------------------------------------------------


def behaviour_action(env: ToyEnv, kind: str, s: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    if kind == "random":
        return rng.uniform(env.action_low, env.action_high, size=(len(s), env.action_dim))
    if kind not in BEHAVIOUR_NOISE:
        raise ConfigError(f"unknown behaviour policy {kind!r}")
    a = env.controller(s) + BEHAVIOUR_NOISE[kind] * rng.standard_normal((len(s), env.action_dim))
    return np.clip(a, env.action_low, env.action_high)


def run_episodes(
    env: ToyEnv,
    act: Callable[[np.ndarray], np.ndarray],
    n_episodes: int,
    rng: np.random.Generator,
) -> tuple[np.ndarray, TransitionBatch]:
    """Roll ``n_episodes`` in lock-step; return per-episode returns and all transitions."""
    s = env.initial_state(rng, n_episodes)
    alive = np.ones(n_episodes, dtype=bool)
    returns = np.zeros(n_episodes)
    steps = []
    for _ in range(env.horizon):
        idx = np.flatnonzero(alive)
        if idx.size == 0:
            break
        a = np.clip(act(s[idx]), env.action_low, env.action_high)
        s_next, r, done = env.step(s[idx], a)
        returns[idx] += r
        steps.append((idx, s[idx], a, r, s_next, done))
        s[idx] = s_next
        alive[idx[done]] = False
    ep = np.concatenate([st[0] for st in steps])
    t = np.concatenate([np.full(len(st[0]), i) for i, st in enumerate(steps)])
    order = np.lexsort((t, ep))
    cols = [np.concatenate([st[k] for st in steps])[order] for k in range(1, 6)]
    batch = TransitionBatch.real(cols[0], cols[1], cols[2], cols[3], cols[4].astype(float))
    return returns, batch


def reference_return(env: ToyEnv, kind: str, episodes: int = 200, seed: int = 0) -> float:
    rng = rng_stream(seed, 7)
    returns, _ = run_episodes(env, lambda s: behaviour_action(env, kind, s, rng), episodes, rng)
    return float(returns.mean())


def normalized_return(env: ToyEnv, raw_return):
    """``100 (raw - R_rand) / (R_exp - R_rand)``."""
    if env.r_exp == env.r_rand:
        raise ValueError("degenerate reference returns")
    return 100.0 * (np.asarray(raw_return, dtype=float) - env.r_rand) / (env.r_exp - env.r_rand)


# -- datasets ----------------------------------------------------------------


@dataclass
class OfflineDataset:
    transitions: TransitionBatch
    meta: dict

    def __len__(self) -> int:
        return len(self.transitions)


def _parse_mix(mix) -> tuple[float, str]:
    """Return ``(demo_ratio, demo_policy)``; the non-demo policy is random."""
    if isinstance(mix, (int, float)):
        return float(mix), "expert"
    if mix in ("random", "medium", "expert"):
        return (0.0, "expert") if mix == "random" else (1.0, mix)
    if isinstance(mix, str) and ":" in mix:
        policy, ratio = mix.split(":", 1)
        return float(ratio), policy
    try:
        return float(mix), "expert"
    except (TypeError, ValueError):
        raise ConfigError(f"cannot parse dataset mix {mix!r}") from None


def generate_dataset(env: ToyEnv, mix, size: int, seed: int) -> OfflineDataset:
    """Roll behaviour policies until ``size`` transitions are collected.

    ``mix`` is a label (``random``/``medium``/``expert``), a demonstration
    ratio (expert episodes among random ones), or ``"<policy>:<ratio>"``.
    Episode ``i`` is a demonstration episode when ``floor((i+1) ratio)``
    exceeds ``floor(i ratio)``, which interleaves them evenly.
    """
    ratio, demo = _parse_mix(mix)
    if size < 1 or not 0.0 <= ratio <= 1.0:
        raise ConfigError("size must be >= 1 and the ratio in [0, 1]")
    chunks = []
    total, episode = 0, 0
    while total < size:
        kind = demo if np.floor((episode + 1) * ratio) > np.floor(episode * ratio) else "random"
        rng = rng_stream(seed, 1000 + episode)
        _, batch = run_episodes(env, lambda s: behaviour_action(env, kind, s, rng), 1, rng)
        chunks.append(batch)
        total += len(batch)
        episode += 1
    data = TransitionBatch.concat(chunks)[:size]
    meta = {"env": env.name, "mix": str(mix), "demo_policy": demo, "demo_ratio": ratio, "seed": seed,
            "size": size, "episodes": episode, "noise": BEHAVIOUR_NOISE}
    return OfflineDataset(data, meta)


def _num(x: float) -> str:
    if not np.isfinite(x):
        raise ValueError("cannot serialise non-finite value")
    return format(float(x), ".17g")


def _arr(xs) -> str:
    return "[" + ",".join(_num(x) for x in np.ravel(xs)) + "]"


def save_dataset(dataset: OfflineDataset, path: str | Path) -> None:
    """JSON lines: a ``{"meta": ...}`` header, then one transition per line."""
    t = dataset.transitions
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps({"meta": dataset.meta}, sort_keys=True) + "\n")
        for i in range(len(t)):
            fh.write(
                f'{{"s":{_arr(t.s[i])},"a":{_arr(t.a[i])},"r":{_num(t.r[i])},"s_next":{_arr(t.s_next[i])},'
                f'"done":{"true" if t.done[i] else "false"},"var_s_next":{_arr(t.var_s_next[i])},'
                f'"var_r":{_num(t.var_r[i])}}}\n'
            )


def load_dataset(path: str | Path) -> OfflineDataset:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ConfigError(f"{path}: empty dataset file")
    header = json.loads(lines[0])
    if "meta" not in header:
        raise ConfigError(f"{path}:1: first line must hold the 'meta' object")
    rows = [json.loads(line) for line in lines[1:] if line.strip()]
    s_next = np.array([r["s_next"] for r in rows], dtype=float)
    rew = np.array([r["r"] for r in rows], dtype=float)
    var_s = np.array([np.broadcast_to(r["var_s_next"], np.shape(r["s_next"])) for r in rows], dtype=float)
    batch = TransitionBatch(
        np.array([r["s"] for r in rows], dtype=float),
        np.array([r["a"] for r in rows], dtype=float),
        rew,
        s_next,
        np.array([float(r["done"]) for r in rows]),
        var_s,
        np.array([r["var_r"] for r in rows], dtype=float),
        s_next.copy(),
        rew.copy(),
    )
    return OfflineDataset(batch, header["meta"])
