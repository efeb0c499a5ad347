"""Columnar transition storage shared by datasets, rollouts and training."""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np


@dataclass
class Transition:
    """A single ``(s, a, r, s', done)`` tuple with predictive variances.

    Real data carries zero variances.
    """

    s: np.ndarray
    a: np.ndarray
    r: float
    s_next: np.ndarray
    done: bool
    var_s_next: np.ndarray
    var_r: float = 0.0

    def __post_init__(self) -> None:
        self.var_s_next = np.broadcast_to(np.asarray(self.var_s_next, dtype=float), np.shape(self.s_next)).copy()
        if (self.var_s_next < 0).any() or self.var_r < 0:
            raise ValueError("variances must be non-negative")


@dataclass
class TransitionBatch:
    """Arrays with a leading batch axis.

    ``s_next``/``r`` hold the realised next state and reward (an observation
    for real data, a model draw for synthetic data).  ``s_next_mean`` and
    ``r_mean`` hold the predictive means the draws came from; for real
    data they equal the realised values.
    """

    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s_next: np.ndarray
    done: np.ndarray
    var_s_next: np.ndarray
    var_r: np.ndarray
    s_next_mean: np.ndarray
    r_mean: np.ndarray

    def __post_init__(self) -> None:
        n = len(self.s)
        for f in fields(self):
            arr = np.asarray(getattr(self, f.name), dtype=float)
            if arr.shape[:1] != (n,):
                raise ValueError(f"field {f.name} has {arr.shape[:1]} rows, expected {n}")
            setattr(self, f.name, arr)
        if (self.var_s_next < 0).any() or (self.var_r < 0).any():
            raise ValueError("variances must be non-negative")

    @classmethod
    def real(cls, s, a, r, s_next, done) -> TransitionBatch:
        s_next = np.asarray(s_next, dtype=float)
        r = np.asarray(r, dtype=float)
        return cls(s, a, r, s_next, done, np.zeros_like(s_next), np.zeros_like(r), s_next.copy(), r.copy())

    @classmethod
    def empty(cls, state_dim: int, action_dim: int) -> TransitionBatch:
        z = np.zeros((0, state_dim))
        return cls(z, np.zeros((0, action_dim)), np.zeros(0), z, np.zeros(0), z, np.zeros(0), z, np.zeros(0))

    @classmethod
    def from_transitions(cls, items: list[Transition]) -> TransitionBatch:
        return cls(
            np.array([t.s for t in items], dtype=float),
            np.array([t.a for t in items], dtype=float),
            np.array([t.r for t in items], dtype=float),
            np.array([t.s_next for t in items], dtype=float),
            np.array([float(t.done) for t in items]),
            np.array([t.var_s_next for t in items], dtype=float),
            np.array([t.var_r for t in items], dtype=float),
            np.array([t.s_next for t in items], dtype=float),
            np.array([t.r for t in items], dtype=float),
        )

    def __len__(self) -> int:
        return len(self.s)

    def __getitem__(self, idx) -> TransitionBatch:
        return TransitionBatch(*(np.asarray(getattr(self, f.name))[idx] for f in fields(self)))

    def transition(self, i: int) -> Transition:
        return Transition(self.s[i], self.a[i], float(self.r[i]), self.s_next[i], bool(self.done[i]),
                          self.var_s_next[i], float(self.var_r[i]))

    @property
    def is_real(self) -> np.ndarray:
        return (self.var_s_next == 0).all(axis=1) & (self.var_r == 0)

    @staticmethod
    def concat(batches: list[TransitionBatch]) -> TransitionBatch:
        return TransitionBatch(*(np.concatenate([getattr(b, f.name) for b in batches]) for f in fields(TransitionBatch)))

    def sample(self, n: int, rng: np.random.Generator) -> TransitionBatch:
        return self[rng.integers(0, len(self), size=n)]
