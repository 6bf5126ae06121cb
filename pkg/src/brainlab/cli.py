"""Command-line front door: ``brainlab train|variance|frontier|ablate|nsweep|fit-reward``.

Exit codes: 0 success, 1 assertion or divergence failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ExperimentConfig, load_config
from .errors import ConfigError, DivergenceError, InvalidInputError
from .oracle import DEFAULT_THETA_GRID, variance_experiment
from .rewards import fit_bradley_terry, bradley_terry_objective, read_preference_file
from .tasks import build_task
from .trainer import train

log = logging.getLogger("brainlab")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise _UsageError(f"{self.prog}: error: {message}")


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def write_csv(path: Path, header: list[str], rows, seed, digest: str) -> None:
    """CSV with one ``#`` metadata line, a header row and LF line endings."""
    buf = io.StringIO()
    buf.write(f"# seed={seed} config_hash={digest} version=brainlab-{__version__}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_fmt(v) for v in row])
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(buf.getvalue())


def read_csv(path) -> tuple[str, list[dict]]:
    """Metadata line and rows of a CSV written by :func:`write_csv`."""
    with open(path, encoding="utf-8", newline="") as fh:
        meta = fh.readline().rstrip("\n")
        return meta, list(csv.DictReader(fh))


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if not args.config:
        cfg.digest = hashlib.sha256(b"defaults").hexdigest()[:16]
    if args.seed is not None:
        cfg.trainer = dataclasses.replace(cfg.trainer, seed=args.seed)
    return cfg


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise _UsageError(f"expected a comma-separated list of integers, got {text!r}") from None


def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise _UsageError(f"expected a comma-separated list of numbers, got {text!r}") from None


def _plot(path: Path, series: dict, xlabel: str, ylabel: str, scatter: bool = False) -> None:
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        log.warning("matplotlib is not installed; skipping %s", path.name)
        return
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for label, (xs, ys) in series.items():
        if scatter:
            ax.plot(xs, ys, "o-", ms=3, label=label)
        else:
            ax.plot(xs, ys, label=label)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


# commands

def cmd_train(args) -> int:
    cfg = _config(args)
    task = build_task(cfg.task)
    out = Path(args.out)
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)

    def save(epoch, step, q_theta):
        q_theta.save(ckpt_dir / f"epoch_{epoch:04d}.json")

    run = train(task.prior, task.reward, task.prompts, cfg.trainer, on_refresh=save)
    rows = [(r.step, r.kl_to_posterior, r.mean_reward, r.snkl, r.logratio_kl, cfg.trainer.seed,
             cfg.trainer.estimator) for r in run.metrics]
    write_csv(out / "metrics.csv", ["step", "kl_to_posterior", "mean_reward", "snkl", "logratio_kl", "seed",
                                    "estimator"], rows, cfg.trainer.seed, cfg.digest)
    run.q_theta.save(out / "final_policy.json")
    final = run.final
    print(f"final step={final.step} kl_to_posterior={final.kl_to_posterior:.6g} "
          f"mean_reward={final.mean_reward:.6g}")
    return EXIT_OK


def cmd_variance(args) -> int:
    grid = _float_list(args.grid) if args.grid is not None else list(DEFAULT_THETA_GRID)
    if not grid:
        raise _UsageError("--grid must name at least one point")
    if args.n < 1 or args.reps < 2:
        raise _UsageError("--n must be >= 1 and --reps >= 2")
    seed = 0 if args.seed is None else args.seed
    rows = variance_experiment(grid, n=args.n, repetitions=args.reps, seed=seed)
    digest = hashlib.sha256(json.dumps({"grid": grid, "n": args.n, "reps": args.reps}).encode()).hexdigest()[:16]
    out = Path(args.out)
    write_csv(out / "variance.csv", ["theta", "var_gdc", "var_gdcpp", "var_brain", "n", "repetitions", "seed"],
              [(r.theta, r.var_gdc, r.var_gdcpp, r.var_brain, args.n, args.reps, seed) for r in rows], seed, digest)
    if args.plot:
        thetas = [r.theta for r in rows]
        _plot(out / "variance.png", {
            "GDC": (thetas, [r.var_gdc for r in rows]),
            "GDC++": (thetas, [r.var_gdcpp for r in rows]),
            "BRAIn": (thetas, [r.var_brain for r in rows]),
        }, "theta", "gradient variance")
    bad = [r.theta for r in rows if not (r.var_brain < r.var_gdc and r.var_brain < r.var_gdcpp)]
    for r in rows:
        print(f"theta={r.theta:.3g} gdc={r.var_gdc:.5g} gdcpp={r.var_gdcpp:.5g} brain={r.var_brain:.5g}")
    if args.assert_ordering and bad:
        print(f"ordering violated at theta={', '.join(f'{t:g}' for t in bad)}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


def frontier_rows(cfg: ExperimentConfig, gammas: list[float]) -> list[tuple]:
    """(gamma, step, kl_proxy, mean_reward, estimator, kl_exact) per checkpoint."""
    task = build_task(cfg.task)
    per_prompt = int(cfg.frontier.get("samples_per_prompt", 8))
    rows = []
    for gi, gamma in enumerate(gammas):
        for est in cfg.frontier["estimators"]:
            tc = dataclasses.replace(cfg.trainer, gamma=gamma, estimator=est)
            run = train(task.prior, task.reward, task.prompts, tc)
            exact = {r.step: r.kl_to_posterior for r in run.metrics}
            for step, policy in run.checkpoints:
                # fresh samples keyed by (seed, gamma, step) so step 0 coincides across estimators
                rng = np.random.default_rng([tc.seed, gi, step])
                ratios, rewards = [], []
                for x in task.prompts:
                    ys = policy.sample(x, per_prompt, rng)
                    ratios.extend(policy.log_probs(x, ys) - task.prior.log_probs(x, ys))
                    rewards.extend(task.reward.rewards(x, ys))
                rows.append((gamma, step, float(np.mean(ratios)), float(np.mean(rewards)), est, exact[step]))
    return rows


def cmd_frontier(args) -> int:
    cfg = _config(args)
    gammas = _float_list(args.gammas) if args.gammas is not None else [float(g) for g in cfg.frontier["gammas"]]
    if not gammas:
        raise _UsageError("gamma list must be non-empty")
    if any(not (np.isfinite(g) and g > 0) for g in gammas):
        raise _UsageError("gammas must be positive and finite")
    rows = frontier_rows(cfg, gammas)
    out = Path(args.out)
    write_csv(out / "frontier.csv", ["gamma", "step", "kl_proxy", "mean_reward", "estimator", "kl_exact"],
              rows, cfg.trainer.seed, cfg.digest)
    if args.plot:
        series = {}
        for g, step, kl, rew, est, _ in rows:
            xs, ys = series.setdefault(f"{est} gamma={g:g}", ([], []))
            xs.append(kl)
            ys.append(rew)
        _plot(out / "frontier.png", series, "mean log q/p", "mean reward", scatter=True)
    print(f"wrote {len(rows)} frontier rows")
    return EXIT_OK


def _final_runs(cfg: ExperimentConfig, estimators, seeds, **overrides):
    task = build_task(cfg.task)
    for seed in seeds:
        for est in estimators:
            tc = dataclasses.replace(cfg.trainer, estimator=est, seed=seed, **overrides)
            yield seed, est, train(task.prior, task.reward, task.prompts, tc).final


def ablate_rows(cfg: ExperimentConfig) -> list[tuple]:
    seeds = cfg.ablate.get("seeds") or [cfg.trainer.seed]
    return [(seed, est, f.kl_to_posterior, f.mean_reward)
            for seed, est, f in _final_runs(cfg, cfg.ablate["variants"], seeds)]


def cmd_ablate(args) -> int:
    cfg = _config(args)
    if args.seed is not None:
        cfg.ablate["seeds"] = [args.seed]
    rows = ablate_rows(cfg)
    write_csv(Path(args.out) / "ablate.csv", ["seed", "variant", "final_kl_to_posterior", "final_mean_reward"],
              rows, cfg.trainer.seed, cfg.digest)
    for seed, est, kl, rew in rows:
        print(f"seed={seed} {est:<18} kl={kl:.6g} mean_reward={rew:.6g}")
    if not args.assert_ordering:
        return EXIT_OK
    failures = []
    for seed in sorted({r[0] for r in rows}):
        got = {est: (kl, rew) for s, est, kl, rew in rows if s == seed}
        if "brain" in got and "brain_no_baseline" in got and not got["brain"][0] < got["brain_no_baseline"][0]:
            failures.append(f"seed {seed}: brain KL not below brain_no_baseline")
        chain = [v for v in ("dpo", "dpo_sft_iw", "dpo_sft_iw_n", "brain") if v in got]
        rewards = [got[v][1] for v in chain]
        if any(a > b for a, b in zip(rewards, rewards[1:])):
            failures.append(f"seed {seed}: mean reward not ordered along {' <= '.join(chain)}")
    for f in failures:
        print(f, file=sys.stderr)
    return EXIT_FAIL if failures else EXIT_OK


def nsweep_rows(cfg: ExperimentConfig, n_list: list[int]) -> list[tuple]:
    """(n, estimator, final mean reward averaged over the configured seeds)."""
    seeds = cfg.nsweep.get("seeds") or [cfg.trainer.seed]
    rows = []
    for n in n_list:
        finals = {}
        for _, est, f in _final_runs(cfg, cfg.nsweep["estimators"], seeds, n=n):
            finals.setdefault(est, []).append(f.mean_reward)
        rows.extend((n, est, float(np.mean(v))) for est, v in finals.items())
    return rows


def cmd_nsweep(args) -> int:
    cfg = _config(args)
    if args.seed is not None:
        cfg.nsweep["seeds"] = [args.seed]
    n_list = _int_list(args.n_list) if args.n_list is not None else [int(n) for n in cfg.nsweep["n_list"]]
    if not n_list or any(n < 1 for n in n_list):
        raise _UsageError("n list must be non-empty and positive")
    for n in n_list:
        for est in cfg.nsweep["estimators"]:
            dataclasses.replace(cfg.trainer, estimator=est, n=n)  # validate before any training
    rows = nsweep_rows(cfg, n_list)
    out = Path(args.out)
    write_csv(out / "nsweep.csv", ["n", "estimator", "final_metric"], rows, cfg.trainer.seed, cfg.digest)
    if args.plot:
        series = {}
        for n, est, metric in rows:
            xs, ys = series.setdefault(est, ([], []))
            xs.append(n)
            ys.append(metric)
        _plot(out / "nsweep.png", series, "samples per prompt", "final mean reward", scatter=True)
    for n, est, metric in rows:
        print(f"n={n} {est:<12} final_mean_reward={metric:.6g}")
    return EXIT_OK


def cmd_fit_reward(args) -> int:
    triplets = read_preference_file(args.preference_file, args.family)
    if not triplets:
        raise _UsageError(f"{args.preference_file}: no preference triplets found")
    space = sorted({t.winner for t in triplets} | {t.loser for t in triplets})
    model = fit_bradley_terry(triplets, space, gamma=args.gamma, l2=args.l2)
    loglik, _ = bradley_terry_objective(model.table, triplets, model.outcomes, args.gamma, 0.0)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model.save(out / "reward.json")
    digest = hashlib.sha256(Path(args.preference_file).read_bytes()).hexdigest()[:16]
    write_csv(out / "fit.csv", ["triplets", "log_likelihood"], [(len(triplets), loglik)], 0, digest)
    print(f"fitted {len(triplets)} triplets: log_likelihood={loglik:.8g}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="brainlab", description="Reward-conditioned posterior distillation on enumerable toys.")
    parser.add_argument("--version", action="version", version=f"brainlab {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, config=True):
        if config:
            p.add_argument("--config", type=str, default=None, help="YAML experiment config")
        p.add_argument("--out", type=str, default="out", help="output directory")
        p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("train", help="run the training loop and write metrics and checkpoints")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("variance", help="gradient variance of GDC, GDC++ and BRAIn on the Gaussian toy")
    common(p, config=False)
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--reps", type=int, default=2000)
    p.add_argument("--grid", type=str, default=None, help="comma-separated theta values")
    p.add_argument("--plot", action="store_true")
    p.add_argument("--assert-ordering", action="store_true")
    p.set_defaults(func=cmd_variance)

    p = sub.add_parser("frontier", help="KL-reward frontier over gammas and checkpoints")
    common(p)
    p.add_argument("--gammas", type=str, default=None, help="comma-separated gamma values")
    p.add_argument("--plot", action="store_true")
    p.set_defaults(func=cmd_frontier)

    p = sub.add_parser("ablate", help="compare baseline and DPO-family variants from identical seeds")
    common(p)
    p.add_argument("--assert-ordering", action="store_true")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("nsweep", help="final mean reward against samples per prompt")
    common(p)
    p.add_argument("--n-list", type=str, default=None, help="comma-separated sample counts")
    p.add_argument("--plot", action="store_true")
    p.set_defaults(func=cmd_nsweep)

    p = sub.add_parser("fit-reward", help="fit a Bradley-Terry reward table to a preference file")
    p.add_argument("preference_file")
    p.add_argument("--out", type=str, default="out")
    p.add_argument("--family", choices=("categorical", "bigram"), default="categorical")
    p.add_argument("--gamma", type=float, default=1.0)
    p.add_argument("--l2", type=float, default=0.0)
    p.set_defaults(func=cmd_fit_reward)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (_UsageError, ConfigError, InvalidInputError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"brainlab {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as exc:
        print(f"brainlab {args.command}: diverged at {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
