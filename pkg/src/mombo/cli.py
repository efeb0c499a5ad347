"""Command-line entry point.

Artifacts are laid out per seed under the output directory::

    <out>/config.json              resolved configuration
    <out>/seed<k>/dataset.jsonl    offline dataset
    <out>/seed<k>/dynamics.ckpt    ensemble (+ dynamics.ckpt.json)
    <out>/seed<k>/policy.ckpt      actor, critics, target critics
    <out>/seed<k>/curve.csv        learning curve
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import harness
from .config import RunConfig, dump_config, load_config
from .dynamics import EnsembleConfig, load_ensemble, save_ensemble, train_ensemble
from .envs import generate_dataset, load_dataset, make_env, save_dataset
from .errors import ConfigError, MomboError, TrainingError, UndefinedBoundError
from .nncore import rng_stream
from .pevi import TrainConfig, load_policy, save_policy, train
from .plotting import line_plot, write_csv, write_svg

log = logging.getLogger("mombo")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _seed_dir(cfg: RunConfig, seed: int) -> Path:
    d = Path(cfg.out_dir) / f"seed{seed}"
    d.mkdir(parents=True, exist_ok=True)
    return d


def _require(path: Path, hint: str) -> Path:
    if not path.exists():
        raise ConfigError(f"missing {path}; {hint}")
    return path


# -- commands ------------------------------------------------------------------


def _dataset(cfg: RunConfig, seed: int, create: bool):
    path = _seed_dir(cfg, seed) / "dataset.jsonl"
    if path.exists():
        return load_dataset(path)
    if not create:
        _require(path, "run `mombo gen-dataset` first")
    ds = generate_dataset(make_env(cfg.env), cfg.dataset_mix, cfg.dataset_size, seed)
    save_dataset(ds, path)
    return ds


def _dynamics(cfg: RunConfig, seed: int, create: bool):
    path = _seed_dir(cfg, seed) / "dynamics.ckpt"
    if path.exists():
        return load_ensemble(path)
    if not create:
        _require(path, "run `mombo train-dynamics` first")
    model = train_ensemble(_dataset(cfg, seed, create).transitions, cfg.ensemble, seed)
    save_ensemble(model, path)
    return model


def cmd_gen_dataset(cfg: RunConfig, args) -> None:
    env = make_env(cfg.env)
    for seed in cfg.seeds:
        path = _seed_dir(cfg, seed) / "dataset.jsonl"
        ds = generate_dataset(env, cfg.dataset_mix, cfg.dataset_size, seed)
        save_dataset(ds, path)
        log.info("wrote %s (%d transitions, %d episodes)", path, len(ds), ds.meta["episodes"])


def cmd_train_dynamics(cfg: RunConfig, args) -> None:
    for seed in cfg.seeds:
        ds = _dataset(cfg, seed, create=False)
        model = train_ensemble(ds.transitions, cfg.ensemble, seed)
        path = _seed_dir(cfg, seed) / "dynamics.ckpt"
        save_ensemble(model, path)
        log.info("wrote %s (elites %s)", path, model.elites)


def cmd_train(cfg: RunConfig, args) -> None:
    env = make_env(cfg.env)
    curves = []
    for seed in cfg.seeds:
        ds = _dataset(cfg, seed, create=True)
        model = _dynamics(cfg, seed, create=True)
        res = train(ds.transitions, env, model, cfg.penalty, cfg.sac, cfg.schedule, seed)
        d = _seed_dir(cfg, seed)
        harness.write_curve(d / "curve.csv", res.curve)
        save_policy(res.state, d / "policy.ckpt")
        rows = harness.curve_rows(res.curve)
        metrics = {"seed": seed, "aulc": harness.aulc(r["normalized_return"] for r in rows),
                   "final_normalized": res.final_normalized, "seconds": res.seconds}
        (d / "metrics.json").write_text(json.dumps(metrics, indent=2) + "\n", encoding="utf-8")
        curves.append(rows)
        log.info("seed %d: AULC %.2f, final %.2f", seed, metrics["aulc"], metrics["final_normalized"])
    out = Path(cfg.out_dir)
    agg = harness.aggregate(curves)
    write_csv(out / "aggregate.csv", agg, ("step", "mean", "std", "n_runs"))
    series = [(f"seed {s}", [r["step"] for r in c], [r["normalized_return"] for r in c])
              for s, c in zip(cfg.seeds, curves)]
    write_svg(out / "curve.svg", line_plot(series, "Learning curve", "gradient step", "normalized return"))


def cmd_eval_uq(cfg: RunConfig, args) -> None:
    env = make_env(cfg.env)
    summary = []
    for seed in cfg.seeds:
        d = _seed_dir(cfg, seed)
        actor, critics = load_policy(_require(d / "policy.ckpt", "run `mombo train` first"))
        model = _dynamics(cfg, seed, create=False)
        rep = harness.eval_uq(env, actor, critics, model, cfg.penalty, seed,
                              cfg.uq.episodes, cfg.uq.every, cfg.uq.n_exact)
        rows = rep.rows()
        write_csv(d / "uq.csv", rows)
        summary.extend({"seed": seed, **r} for r in rows)
        for r in rows:
            log.info("seed %d %-6s accuracy %.3f tightness %.4f", seed, r["strategy"], r["accuracy"], r["tightness"])
    write_csv(Path(cfg.out_dir) / "uq_summary.csv", summary)


def _fixture(cfg: RunConfig, seed: int):
    """Tiny dataset, dynamics model and policy, trained from scratch."""
    env = make_env(cfg.env)
    ds = generate_dataset(env, cfg.dataset_mix, 2000, seed)
    model = train_ensemble(ds.transitions, EnsembleConfig(max_epochs=5), seed)
    res = train(ds.transitions, env, model, cfg.penalty, cfg.sac,
                TrainConfig(steps=500, rollout_freq=250, rollout_batch=200, eval_every=500, eval_episodes=2), seed)
    return ds, model, res.state.actor, res.state.critics


def _critic_setup(cfg: RunConfig, seed: int, fixture: bool):
    if fixture:
        return _fixture(cfg, seed)
    d = _seed_dir(cfg, seed)
    hint = "run `mombo train` first or pass --fixture to train tiny fixtures"
    actor, critics = load_policy(_require(d / "policy.ckpt", hint))
    model = load_ensemble(_require(d / "dynamics.ckpt", hint))
    ds = load_dataset(_require(d / "dataset.jsonl", hint))
    return ds, model, actor, critics


def _probe_belief(ds, model, actor, seed: int):
    i = int(rng_stream(seed, 700).integers(0, len(ds)))
    t = ds.transitions
    return harness.critic_belief(model, actor, t.s[i : i + 1], t.a[i : i + 1])


def cmd_fig_mm_vs_mc(cfg: RunConfig, args) -> None:
    seed = cfg.seeds[0]
    ds, model, actor, critics = _critic_setup(cfg, seed, args.fixture)
    belief = _probe_belief(ds, model, actor, seed)
    res = harness.mm_vs_mc(critics[0], belief, cfg.fig.n_grid, cfg.fig.reps, cfg.fig.n_ref, seed)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = [{**r, "ref_mean": res.ref_mean, "ref_std_err": res.ref_std_err, "mm_rep_spread": res.mm_rep_spread}
            for r in res.rows]
    write_csv(out / "fig_mm_vs_mc.csv", rows)
    write_svg(out / "fig_mm_vs_mc.svg", harness.mm_vs_mc_svg(res))
    log.info("MM mean %.6g std %.3g; MC reference %.6g +- %.2g; variance slope %.3f",
             res.mm_mean, res.mm_std, res.ref_mean, res.ref_std_err, res.variance_slope)


def cmd_bounds(cfg: RunConfig, args) -> None:
    seed = cfg.seeds[0]
    ds, model, actor, critics = _critic_setup(cfg, seed, args.fixture)
    belief = _probe_belief(ds, model, actor, seed)
    b = cfg.bounds
    layers, grid = harness.bounds_table(critics[0], belief, b.horizon, b.n_grid, b.delta, b.rmax, b.gamma)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "bounds_layers.csv", layers)
    write_csv(out / "bounds_grid.csv", grid)
    for r in grid:
        log.info("N=%d: mc_subopt %.4g, mm_subopt %.4g", r["n"], r["mc_subopt"], r["mm_subopt"])


def cmd_aggregate(cfg: RunConfig, args) -> None:
    paths = args.curves or [_seed_dir(cfg, s) / "curve.csv" for s in cfg.seeds]
    for p in paths:
        _require(Path(p), "pass curve CSV paths or run `mombo train` first")
    rows = harness.aggregate_files(paths, Path(cfg.out_dir) / "aggregate.csv")
    for r in rows:
        log.info("step %d: %.2f +- %.2f", r["step"], r["mean"], r["std"])


COMMANDS = {
    "gen-dataset": (cmd_gen_dataset, "roll behaviour policies into a JSON-lines dataset"),
    "train-dynamics": (cmd_train_dynamics, "fit the dynamics ensemble"),
    "train": (cmd_train, "train the actor-critic and write learning curves"),
    "eval-uq": (cmd_eval_uq, "accuracy and tightness of each penalty"),
    "fig-mm-vs-mc": (cmd_fig_mm_vs_mc, "moment matching versus Monte Carlo estimates"),
    "bounds": (cmd_bounds, "W1 and suboptimality bound tables"),
    "aggregate": (cmd_aggregate, "mean and std of learning curves across seeds"),
}


def _global_flags(parser: argparse.ArgumentParser, suppress: bool) -> None:
    kw = {"default": argparse.SUPPRESS} if suppress else {}
    parser.add_argument("--config", type=Path, help="JSON run configuration", **kw)
    parser.add_argument("--seed", type=int, help="run this seed only (overrides the config)", **kw)
    parser.add_argument("--out", type=Path, help="output directory (overrides the config)", **kw)
    parser.add_argument("--quiet", action="store_true", help="only log warnings and errors", **kw)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mombo", description="Offline RL experiments with moment-matched Bellman targets.")
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        # flags may also follow the subcommand; suppressed defaults keep earlier values
        _global_flags(p, suppress=True)
        if name in ("fig-mm-vs-mc", "bounds"):
            p.add_argument("--fixture", action="store_true", help="train tiny fixtures instead of loading checkpoints")
        if name == "aggregate":
            p.add_argument("curves", nargs="*", type=Path, help="curve CSV files (default: per-seed curves)")
    return parser


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s", force=True)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.seeds = [args.seed]
        if args.out is not None:
            cfg.out_dir = str(args.out)
        Path(cfg.out_dir).mkdir(parents=True, exist_ok=True)
        dump_config(cfg, Path(cfg.out_dir) / "config.json")
        COMMANDS[args.command][0](cfg, args)
    except (TrainingError, UndefinedBoundError, FloatingPointError) as exc:
        print(f"mombo: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, MomboError, ValueError) as exc:
        print(f"mombo: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
