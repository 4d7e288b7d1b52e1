"""Experiment orchestration: trial execution, CSV emission, and the
command-line interface.

Trials are the unit of parallelism; per-trial RNG streams are derived by
seed arithmetic, so results are identical whatever the worker count
(set via the SAFEBANDITS_WORKERS environment variable).
"""

from __future__ import annotations

import argparse
import csv
import os
import sys

import yaml
from dataclasses import dataclass, field
from multiprocessing import get_context

from .baselines import run_conservative_ts, run_mom, run_trace_norm
from .config import ConfigError, ExperimentConfig, expand_sweep, load_config, set_by_path
from .environment import make_synthetic_environment, generate_task_model, rng_for, STREAM_MODEL
from .metrics import TrialMetrics, mean_and_se, summarize_trial
from .movielens import build_movielens_tasks, load_ratings, make_movielens_environment
from .solver import run_safe_altgdmin

CSV_HEADER = [
    "algorithm", "dataset", "trial", "epoch", "round", "d", "r", "T", "K",
    "alpha", "rho", "cum_regret", "violations", "est_error", "sd",
]

WORKERS_ENV_VAR = "SAFEBANDITS_WORKERS"

EXIT_OK = 0
EXIT_TRIAL_FAILURES = 1
EXIT_CONFIG_ERROR = 2


@dataclass
class TrialOutcome:
    trial: int
    algorithm: str
    metrics: TrialMetrics | None
    extras: dict = field(default_factory=dict)
    error: str | None = None


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    rows: list[dict]
    outcomes: list[TrialOutcome]

    @property
    def failures(self) -> list[TrialOutcome]:
        return [o for o in self.outcomes if o.error is not None]


def _make_environment(config: ExperimentConfig, trial_seed: int, shared):
    if config.dataset == "movielens":
        return make_movielens_environment(
            shared, trial_seed, config.K, config.baseline_rank, config.sigma_eta
        )
    model = generate_task_model(
        config.d, config.r, config.T,
        col_norm_bounds=config.col_norm_bounds,
        rng_seed=rng_for(trial_seed, STREAM_MODEL),
        sigma_eta=config.sigma_eta,
    )
    return make_synthetic_environment(
        model, trial_seed, config.K, config.baseline_rank, config.sigma_eta,
        reward_floor=config.baseline_reward_floor, gap_window=config.gap_window,
    )


def _run_algorithm(name: str, env, schedule, config: ExperimentConfig, trial_seed: int):
    if name == "safe_altgdmin":
        return run_safe_altgdmin(env, schedule, config.solver, config.alpha,
                                 config.delta, trial_seed)
    if name == "ts_conservative":
        return run_conservative_ts(env, schedule, config.alpha, config.delta,
                                   trial_seed, reg=config.ts.reg,
                                   norm_bound=config.ts.norm_bound)
    if name == "trace_norm":
        return run_trace_norm(env, schedule, config.alpha, trial_seed,
                              lambda_scale=config.trace_norm.lambda_scale,
                              iters=config.trace_norm.iters)
    if name == "mom":
        return run_mom(env, schedule, config.alpha, trial_seed)
    raise ConfigError(f"unknown algorithm {name!r}")


def run_single_trial(config: ExperimentConfig, trial: int, shared=None) -> list[TrialOutcome]:
    """All configured algorithms on one trial's shared environment stream.

    Each algorithm gets a freshly seeded copy of the same environment, so
    the byte stream of environment draws is identical across algorithms.
    """
    trial_seed = config.base_seed + trial
    schedule = config.build_schedule()
    outcomes = []
    for name in config.algorithms:
        try:
            env = _make_environment(config, trial_seed, shared)
            run = _run_algorithm(name, env, schedule, config, trial_seed)
            metrics = summarize_trial(
                run.records,
                schedule.boundaries,
                config.alpha,
                theta_by_epoch=run.theta_by_epoch,
                theta_star=env.model.theta_star,
                basis_by_epoch=run.basis_by_epoch,
                b_star=env.model.b_star,
                sd_trace=run.sd_trace,
            )
            extras = {}
            if name == "safe_altgdmin":
                extras = {
                    "gamma": run.gamma,
                    "trunc_multiplier": run.trunc_multiplier,
                    "rho_effective": run.rho_effective,
                    "gd_iter_floor": run.gd_iter_floor,
                    "gd_iter_floor_met": run.gd_iter_floor_met,
                }
            outcomes.append(TrialOutcome(trial, name, metrics, extras))
        except Exception as exc:  # noqa: BLE001 - trial isolation is the contract
            outcomes.append(TrialOutcome(trial, name, None, error=f"{type(exc).__name__}: {exc}"))
    return outcomes


def _build_shared(config: ExperimentConfig):
    if config.dataset != "movielens":
        return None
    if config.movielens.path is None:
        raise ConfigError("movielens dataset requires movielens.path (the u.data file)")
    ratings = load_ratings(config.movielens.path)
    return build_movielens_tasks(
        ratings, config.d, config.T,
        nmf_iters=config.movielens.nmf_iters,
        seed=config.movielens.pipeline_seed,
    )


def _worker_count() -> int:
    raw = os.environ.get(WORKERS_ENV_VAR, "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def _star_trial(args):
    config, trial, shared = args
    return run_single_trial(config, trial, shared)


def run_experiment(config: ExperimentConfig) -> ExperimentResult:
    """Execute every (trial, algorithm) pair, then assemble result rows in
    trial order plus mean / standard-error aggregate rows per epoch."""
    shared = _build_shared(config)
    workers = _worker_count()
    if workers > 1 and config.trials > 1:
        with get_context("spawn").Pool(workers) as pool:
            per_trial = pool.map(
                _star_trial, [(config, i, shared) for i in range(config.trials)]
            )
    else:
        per_trial = [run_single_trial(config, i, shared) for i in range(config.trials)]
    outcomes = [o for trial_outcomes in per_trial for o in trial_outcomes]
    rows = build_rows(config, outcomes)
    return ExperimentResult(config=config, rows=rows, outcomes=outcomes)


def build_rows(config: ExperimentConfig, outcomes: list[TrialOutcome]) -> list[dict]:
    schedule = config.build_schedule()
    boundaries = schedule.boundaries
    base = {
        "dataset": config.dataset,
        "d": config.d, "r": config.r, "T": config.T, "K": config.K,
        "alpha": config.alpha, "rho": config.solver.rho,
    }
    rows: list[dict] = []
    for out in outcomes:
        if out.metrics is None:
            continue
        met = out.metrics
        for m in range(len(boundaries)):
            est = met.est_error_by_epoch[m] if m < len(met.est_error_by_epoch) else None
            sd = met.sd_by_epoch[m] if m < len(met.sd_by_epoch) else None
            rows.append({
                **base,
                "algorithm": out.algorithm,
                "trial": out.trial,
                "epoch": m + 1,
                "round": boundaries[m],
                "cum_regret": met.regret_by_epoch[m],
                "violations": met.violations_by_epoch[m],
                "est_error": est,
                "sd": sd,
            })
    # Aggregates over successful trials, appended per (algorithm, epoch).
    for name in config.algorithms:
        good = [o for o in outcomes if o.algorithm == name and o.metrics is not None]
        if not good:
            continue
        for m in range(len(boundaries)):
            cols = {
                "cum_regret": [o.metrics.regret_by_epoch[m] for o in good],
                "violations": [float(o.metrics.violations_by_epoch[m]) for o in good],
                "est_error": [o.metrics.est_error_by_epoch[m] for o in good
                              if o.metrics.est_error_by_epoch[m] is not None],
                "sd": [o.metrics.sd_by_epoch[m] for o in good
                       if m < len(o.metrics.sd_by_epoch) and o.metrics.sd_by_epoch[m] is not None],
            }
            for stat_idx, stat in enumerate(("mean", "se")):
                row = {
                    **base,
                    "algorithm": name,
                    "trial": stat,
                    "epoch": m + 1,
                    "round": boundaries[m],
                }
                for key, values in cols.items():
                    row[key] = mean_and_se(values)[stat_idx] if values else None
                rows.append(row)
    return rows


def write_csv(rows: list[dict], path: str) -> None:
    """Stable 15-column schema; missing fields serialize as empty; UTF-8 LF."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for row in rows:
            writer.writerow([
                "" if row.get(key) is None else row.get(key) for key in CSV_HEADER
            ])


def _add_common_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML config file")
    p.add_argument("--algorithm", help="algorithm name, comma list, or 'all'")
    p.add_argument("--trials", type=int, help="number of independent trials")
    p.add_argument("--seed", type=int, help="base seed (trial i uses base_seed + i)")
    p.add_argument("--out", default="results.csv", help="output CSV path")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key, dotted paths allowed "
                        "(e.g. --set solver.rho=0.2)")


def _collect_overrides(args) -> dict:
    overrides: dict = {}
    if args.algorithm is not None:
        overrides["algorithm"] = args.algorithm
    if args.trials is not None:
        overrides["trials"] = args.trials
    if args.seed is not None:
        overrides["base_seed"] = args.seed
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError:
            value = raw
        overrides[key] = value
    return overrides


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="safebandits",
        description="Conservative multi-task linear bandit experiments",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run one experiment")
    _add_common_args(run_p)

    sweep_p = sub.add_parser("sweep", help="run a parameter sweep")
    _add_common_args(sweep_p)
    sweep_p.add_argument("--param", required=True, help="config key to sweep")
    sweep_p.add_argument("--values", required=True,
                         help="comma-separated values for the swept key")

    ml_p = sub.add_parser("movielens", help="run on the MovieLens-100K pipeline")
    _add_common_args(ml_p)
    ml_p.add_argument("--data", required=True, help="path to the u.data ratings file")
    ml_p.add_argument("--tasks", type=int, default=None, help="number of task clusters")
    ml_p.add_argument("--dim", type=int, default=None, help="feature dimension (square)")

    args = parser.parse_args(argv)
    try:
        overrides = _collect_overrides(args)
        if args.command == "sweep":
            overrides["sweep.param"] = args.param
            overrides["sweep.values"] = [
                yaml_scalar(v) for v in str(args.values).split(",")
            ]
        if args.command == "movielens":
            overrides["dataset"] = "movielens"
            overrides["movielens.path"] = args.data
            overrides["T"] = args.tasks if args.tasks is not None else 5
            if args.dim is not None:
                overrides["d"] = args.dim
        cfg = load_config(args.config, overrides)
        configs = expand_sweep(cfg)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG_ERROR

    all_rows: list[dict] = []
    any_failed = False
    for sub_cfg in configs:
        result = run_experiment(sub_cfg)
        all_rows.extend(result.rows)
        for failure in result.failures:
            any_failed = True
            print(
                f"trial {failure.trial} [{failure.algorithm}] failed: {failure.error}",
                file=sys.stderr,
            )
    try:
        write_csv(all_rows, args.out)
    except OSError as exc:
        print(f"cannot write {args.out}: {exc}", file=sys.stderr)
        return EXIT_CONFIG_ERROR
    print(f"wrote {len(all_rows)} rows to {args.out}")
    return EXIT_TRIAL_FAILURES if any_failed else EXIT_OK


def yaml_scalar(text: str):
    return yaml.safe_load(text)


if __name__ == "__main__":
    sys.exit(main())
