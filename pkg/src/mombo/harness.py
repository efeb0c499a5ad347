"""Experiment plumbing: learning-curve bookkeeping, the MM-vs-MC comparison,
uncertainty-quantifier scoring and bound tables."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .bounds import bound_report
from .dynamics import EnsembleModel, predict, sample_transitions
from .envs import ToyEnv, run_episodes
from .gaussmm import DiagonalGaussian, concat_beliefs, mm_forward
from .mcoracle import mc_forward
from .nncore import MlpParams, rng_stream, std_normal_pdf
from .pevi import (
    STRATEGIES,
    CurvePoint,
    PenaltyConfig,
    _min_q,
    mombo_moments,
    penalty_mobile,
    penalty_mopo,
    policy_action,
    target_mombo,
)
from .plotting import line_plot, read_csv, write_csv
from .transitions import TransitionBatch

CURVE_COLUMNS = ("step", "eval_return_mean", "eval_return_std", "normalized_return",
                 "loss_critic", "loss_actor", "mean_penalty")


def aulc(normalized_returns: Sequence[float]) -> float:
    """Area under the learning curve: the plain mean over checkpoints."""
    vals = np.asarray(list(normalized_returns), dtype=float)
    if vals.size == 0:
        raise ValueError("AULC of an empty curve is undefined")
    return float(vals.mean())


def curve_rows(curve: Sequence[CurvePoint]) -> list[dict]:
    return [{k: getattr(p, k) for k in CURVE_COLUMNS} for p in curve]


def write_curve(path: str | Path, curve: Sequence[CurvePoint]) -> None:
    write_csv(path, curve_rows(curve), CURVE_COLUMNS)


def aggregate(curves: Sequence[Sequence[dict]], key: str = "normalized_return") -> list[dict]:
    """Per-checkpoint mean and sample std (ddof=1, 0 for a single run) across runs.

    Runs are aligned on ``step``; only steps present in every run are kept.
    """
    if not curves:
        raise ValueError("nothing to aggregate")
    by_step = [{int(r["step"]): float(r[key]) for r in c} for c in curves]
    steps = sorted(set.intersection(*(set(d) for d in by_step)))
    rows = []
    for step in steps:
        vals = np.array([d[step] for d in by_step])
        std = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
        rows.append({"step": step, "mean": float(vals.mean()), "std": std, "n_runs": len(vals)})
    return rows


def aggregate_files(paths: Sequence[str | Path], out: str | Path, key: str = "normalized_return") -> list[dict]:
    rows = aggregate([read_csv(p) for p in paths], key)
    write_csv(out, rows, ("step", "mean", "std", "n_runs"))
    return rows


@dataclass
class MetricsReport:
    normalized_returns: list[float] = field(default_factory=list)
    aulc: float = float("nan")
    final_return: float = float("nan")
    accuracy: dict[str, float] = field(default_factory=dict)
    tightness: dict[str, float] = field(default_factory=dict)
    penalty_mean: dict[str, float] = field(default_factory=dict)
    penalty_std: dict[str, float] = field(default_factory=dict)
    n_points: int = 0

    def rows(self) -> list[dict]:
        return [
            {
                "strategy": k,
                "accuracy": self.accuracy[k],
                "tightness": self.tightness[k],
                "penalty_mean": self.penalty_mean[k],
                "penalty_std": self.penalty_std[k],
                "n_points": self.n_points,
            }
            for k in self.accuracy
        ]


def score_quantifier(u, error) -> tuple[float, float]:
    """``(accuracy, tightness)`` of penalties ``u`` against absolute Bellman errors."""
    u, error = np.asarray(u, dtype=float), np.abs(np.asarray(error, dtype=float))
    if u.shape != error.shape or u.size == 0:
        raise ValueError("need matching, non-empty penalty and error arrays")
    return float(np.mean(u >= error)), float(np.mean(u - error))


def select_uq_points(env: ToyEnv, actor: MlpParams, episodes: int, every: int, rng) -> TransitionBatch:
    """Every ``every``-th step of each evaluation episode, plus its final step."""
    _, batch = run_episodes(env, lambda s: policy_action(actor, s), episodes, rng)
    keep, t = [], 0
    for i in range(len(batch)):
        t += 1
        last = batch.done[i] > 0 or t == env.horizon or i == len(batch) - 1
        if t % every == 0 or last:
            keep.append(i)
        if last:
            t = 0
    return batch[np.asarray(keep)]


def uq_penalties(batch: TransitionBatch, critics, actor, penalty: PenaltyConfig, rng) -> dict[str, np.ndarray]:
    """``U(s, a)`` of every strategy at the same ``beta``."""
    g, beta = penalty.gamma, penalty.beta
    parts = mombo_moments(batch, critics, actor)
    return {
        "mopo": beta * penalty_mopo(batch),
        "mobile": beta * penalty_mobile(batch, critics, actor, g, max(2, penalty.n_samples), rng),
        "mombo": target_mombo(batch, critics, actor, g, 0.0, parts) - target_mombo(batch, critics, actor, g, beta, parts),
    }


def eval_uq(
    env: ToyEnv,
    actor: MlpParams,
    critics: list[MlpParams],
    model: EnsembleModel,
    penalty: PenaltyConfig,
    seed: int = 0,
    episodes: int = 10,
    every: int = 10,
    n_exact: int = 1000,
    strategies: Sequence[str] = STRATEGIES,
) -> MetricsReport:
    """Accuracy and tightness of each penalty as a Bellman-error quantifier.

    States come from evaluation episodes in the true environment.  The
    exact target uses the true (deterministic) transition and ``n_exact``
    policy draws at the next state; the sample target uses one next state
    and reward drawn from a random elite and one policy draw there.
    """
    rng = rng_stream(seed, 500)
    pts = select_uq_points(env, actor, episodes, every, rng)
    g = penalty.gamma
    s_true, r_true, done_true = env.step(pts.s, pts.a)
    s_rep = np.repeat(s_true, n_exact, axis=0)
    q = _min_q(critics, s_rep, policy_action(actor, s_rep, rng)).reshape(len(pts), n_exact)
    exact = r_true + g * (1.0 - done_true) * q.mean(axis=1)

    mt = sample_transitions(model, pts.s, pts.a, rng, env.terminal)
    sample = mt.r + g * (1.0 - mt.done) * _min_q(critics, mt.s_next, policy_action(actor, mt.s_next, rng))
    error = np.abs(exact - sample)
    us = uq_penalties(mt, critics, actor, penalty, rng)
    report = MetricsReport(n_points=len(pts))
    for k in strategies:
        report.accuracy[k], report.tightness[k] = score_quantifier(us[k], error)
        report.penalty_mean[k] = float(us[k].mean())
        report.penalty_std[k] = float(us[k].std())
    return report


# -- moment matching versus sampling -------------------------------------------


DEFAULT_N_GRID = (10, 100, 1000, 10000)


@dataclass
class MmVsMc:
    mm_mean: float
    mm_std: float
    mm_rep_spread: float  # max - min of the MM mean over repetitions
    ref_mean: float
    ref_std_err: float
    rows: list[dict]
    samples: dict[int, np.ndarray]

    @property
    def variance_slope(self) -> float:
        """Least-squares log-log slope of the MC mean-estimator variance against ``N``."""
        n = np.array([r["n"] for r in self.rows], dtype=float)
        v = np.array([r["mc_mean_std"] ** 2 for r in self.rows])
        return float(np.polyfit(np.log(n), np.log(v), 1)[0])


def critic_belief(model: EnsembleModel, actor: MlpParams, s, a, member: int | None = None) -> DiagonalGaussian:
    """Input belief of a critic at ``(s', a')``: model prediction over ``s'`` joined with the mean action."""
    member = model.elites[0] if member is None else member
    pred = predict(model, member, np.atleast_2d(s), np.atleast_2d(a))
    d = model.state_dim
    s_next = DiagonalGaussian(pred.mean[:, :d], pred.var[:, :d])
    return concat_beliefs(s_next, DiagonalGaussian.point(policy_action(actor, s_next.mean)))


def mm_vs_mc(
    critic: MlpParams,
    belief: DiagonalGaussian,
    n_grid: Sequence[int] = DEFAULT_N_GRID,
    reps: int = 100,
    n_ref: int = 100_000,
    seed: int = 0,
) -> MmVsMc:
    """Compare the deterministic MM output with repeated ``N``-sample MC estimates."""
    if belief.mean.ndim > 1:
        belief = DiagonalGaussian(belief.mean[0], belief.var[0])
    mm_means = []
    for _ in range(reps):
        out, _ = mm_forward(critic, belief)
        mm_means.append(float(out.mean[0]))
    out, _ = mm_forward(critic, belief)
    rng = rng_stream(seed, 600)
    ref = mc_forward(critic, belief, n_ref, rng).samples[:, 0]
    rows, samples = [], {}
    for n in n_grid:
        est = np.array([mc_forward(critic, belief, n, rng).samples[:, 0].mean() for _ in range(reps)])
        samples[n] = mc_forward(critic, belief, n, rng).samples[:, 0]
        rows.append({
            "n": int(n),
            "mc_mean_mean": float(est.mean()),
            "mc_mean_std": float(est.std(ddof=1)),
            "mm_mean": float(out.mean[0]),
            "mm_std": float(math.sqrt(out.var[0])),
        })
    return MmVsMc(
        mm_mean=float(out.mean[0]),
        mm_std=float(math.sqrt(out.var[0])),
        mm_rep_spread=float(np.ptp(mm_means)),
        ref_mean=float(ref.mean()),
        ref_std_err=float(ref.std(ddof=1) / math.sqrt(n_ref)),
        rows=rows,
        samples=samples,
    )


def mm_vs_mc_svg(res: MmVsMc, bins: int = 40) -> str:
    """Histogram densities of the MC samples per ``N`` overlaid on the MM Gaussian."""
    allv = np.concatenate(list(res.samples.values()))
    lo, hi = float(allv.min()), float(allv.max())
    if res.mm_std > 0:
        lo, hi = min(lo, res.mm_mean - 4 * res.mm_std), max(hi, res.mm_mean + 4 * res.mm_std)
    if hi <= lo:
        hi = lo + 1.0
    series = []
    for n, v in res.samples.items():
        dens, edges = np.histogram(v, bins=bins, range=(lo, hi), density=True)
        series.append((f"MC N={n}", 0.5 * (edges[1:] + edges[:-1]), dens))
    xs = np.linspace(lo, hi, 200)
    sd = max(res.mm_std, 1e-12)
    series.append(("MM", xs, std_normal_pdf((xs - res.mm_mean) / sd) / sd))
    return line_plot(series, title="Bootstrap value density", xlabel="Q", ylabel="density")


def bounds_table(
    critic: MlpParams,
    belief: DiagonalGaussian,
    horizon: int,
    n_grid: Sequence[int],
    delta: float,
    rmax: float,
    gamma: float,
) -> tuple[list[dict], list[dict]]:
    """Per-layer bound rows and one ``mc_subopt`` vs ``mm_subopt`` row per ``N``."""
    if belief.mean.ndim > 1:
        belief = DiagonalGaussian(belief.mean[0], belief.var[0])
    layer_rows = bound_report(critic, belief, horizon, n_grid[0], delta, rmax, gamma).csv_rows()
    grid_rows = []
    for n in n_grid:
        rep = bound_report(critic, belief, horizon, n, delta, rmax, gamma)
        grid_rows.append({"n": int(n), "mm_subopt": rep.mm_subopt, "mc_subopt": rep.mc_subopt,
                          "mm_tighter": int(rep.mm_subopt < rep.mc_subopt)})
    return layer_rows, grid_rows
