"""Command-line front end: ``damagelab <command> [options]``."""

from __future__ import annotations

import argparse
import csv
import io
import itertools
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import artifacts
from .analysis import aggregate_summaries, read_summary, summarize_seed
from .cmaes import CmaConfig, optimize_schedule
from .config import ExperimentConfig, config_hash, load_config, output_root, parse_config
from .dp import (
    DPReferenceError,
    ShareSchedule,
    extract_share_schedule,
    load_value_table,
    rollout_reference,
    save_value_table,
    solve_dp,
)
from .env import ConfigError, EnvConfig, observe, rollout
from .policy import checkpoint_bytes, greedy_action, load_checkpoint
from .presets import PRESET_IDS
from .synthetic import (
    MinimalMdpParams,
    commitment_sweep,
    continuation_values,
    exact_q_origin,
    expected_step0_gradient,
    h_star,
    lipschitz_bound,
    mc_step0_gradient,
    sweep_grid,
)
from .trainers import CONDITION_KINDS, Condition, evaluate_policy, greedy_profile, train

log = logging.getLogger("damagelab")


class UsageError(Exception):
    """Invalid combination of command-line options."""


# ---------------------------------------------------------------------------
# helpers


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True, default=float))


def _experiment_from_args(args) -> ExperimentConfig:
    if getattr(args, "config", None):
        exp = load_config(args.config)
    else:
        exp = parse_config({"preset": getattr(args, "preset", None) or "bricklayer"})
    return exp


def _load_schedule(path: str | None) -> ShareSchedule | None:
    if path is None:
        return None
    data = json.loads(Path(path).read_text())
    return ShareSchedule.from_dict(data.get("schedule", data))


def _greedy_trajectory(policy, config: EnvConfig, schedule) -> dict:
    eval_config = config.with_updates(no_exit=False, penalty_weight=0.0)

    def act(state):
        a = greedy_action(policy, observe(state, eval_config), state.t, schedule)
        return a.shares, a.efforts

    return rollout(eval_config, act)


def run_one(exp: ExperimentConfig, seed: int, out_dir: str | Path, schedule: ShareSchedule | None) -> dict:
    """Train one seed, evaluate on the full-horizon environment and write its artifacts."""
    cond = exp.condition
    if cond.fixed_share and schedule is None:
        raise UsageError("fixed-share conditions need a DP share schedule (--schedule)")
    run_hash = exp.run_hash(seed)
    env = exp.env
    result = train(env, cond, seed, replace(exp.ppo, total_steps=exp.steps), schedule if cond.fixed_share else None, exp.eval_env)
    sched = schedule if cond.fixed_share else None
    summary = summarize_seed(
        result.episodes,
        seed=seed,
        preset=exp.preset,
        condition=cond.to_dict(),
        start_age=exp.eval_env.start_age,
        training_steps=result.steps,
        config_hash=run_hash,
        profile=result.profile,
    )
    trajectory = _greedy_trajectory(result.policy, exp.eval_env, sched)
    ckpt = checkpoint_bytes(
        result.policy,
        config_hash=run_hash,
        seed=seed,
        condition=cond.to_dict(),
        eval_env=exp.eval_env.to_dict(),
        schedule=sched.to_dict() if sched is not None else None,
    )
    extra = {"history.json": (json.dumps(result.history, indent=1) + "\n").encode()}
    artifacts.write_artifacts(
        out_dir,
        config_hash=run_hash,
        summary=summary.to_dict(),
        trajectory=trajectory["steps"],
        checkpoint=ckpt,
        extra_files=extra,
        config_echo=exp.echo() | {"seeds": [seed]},
    )
    return summary.to_dict()


def _run_job(job) -> dict:
    exp, seed, out_dir, schedule = job
    return run_one(exp, seed, out_dir, schedule)


# ---------------------------------------------------------------------------
# commands


def cmd_dp_solve(args) -> int:
    exp = _experiment_from_args(args)
    env = exp.env if args.horizon is None else exp.env.with_updates(horizon=args.horizon)
    grid = exp.grid if args.grid_step is None else replace(exp.grid, dD=args.grid_step, dM=args.grid_step)
    table = solve_dp(env, grid)
    ref = rollout_reference(env, table)
    schedule = extract_share_schedule(table, env)
    digest = config_hash({"env": env.to_dict(), "grid": grid.to_dict()})
    out = Path(args.out or output_root() / exp.preset / "dp")
    out.mkdir(parents=True, exist_ok=True)
    save_value_table(table, out / "value_table.npz", digest)
    metrics = {k: ref[k] for k in ("return", "M_final", "D_final", "exit_age", "completed", "termination")}
    artifacts.write_artifacts(
        out,
        config_hash=digest,
        summary={"preset": exp.preset, "reference": metrics, "config_hash": digest},
        trajectory=ref["steps"],
        extra_files={
            "schedule.json": (json.dumps({"schedule": schedule.to_dict(), "config_hash": digest}, indent=2) + "\n").encode(),
            "value_table.npz": (out / "value_table.npz").read_bytes(),
        },
    )
    _emit({"out": str(out), **metrics})
    return 0


def cmd_dp_eval(args) -> int:
    table = load_value_table(args.table)
    ref = rollout_reference(table.config, table)
    _emit({k: ref[k] for k in ("return", "M_final", "D_final", "exit_age", "completed", "termination", "length")})
    if args.out:
        artifacts.atomic_write_bytes(args.out, artifacts.trajectory_csv(ref["steps"]).encode())
    return 0


def _condition_from_args(args, base: Condition) -> Condition:
    changes = {}
    if args.condition is not None:
        changes["kind"] = args.condition.replace("-", "_")
    if args.no_exit:
        changes["no_exit"] = True
    if args.penalty_weight is not None:
        changes["penalty_weight"] = args.penalty_weight
    if args.zero_proxy:
        changes["zero_proxy"] = True
    if args.init_bias is not None:
        changes["init_bias"] = args.init_bias
    if args.horizon is not None:
        changes["train_horizon"] = args.horizon
    return replace(base, **changes)


def _train_experiment(args) -> ExperimentConfig:
    exp = _experiment_from_args(args)
    exp = replace(exp, condition=_condition_from_args(args, exp.condition))
    if args.steps is not None:
        exp = replace(exp, steps=args.steps)
    if getattr(args, "seed", None) is not None:
        exp = replace(exp, seeds=[args.seed])
    if exp.condition.fixed_share and not args.schedule:
        raise UsageError(f"--condition {exp.condition.kind.replace('_', '-')} requires --schedule (a DP schedule artifact)")
    return exp


def cmd_train(args) -> int:
    exp = _train_experiment(args)
    schedule = _load_schedule(args.schedule)
    base = Path(args.out or exp.output_dir or output_root() / exp.preset / exp.condition.kind)
    rows = []
    for seed in exp.seeds:
        out = base / f"seed{seed}" if len(exp.seeds) > 1 or args.out is None else base
        summary = run_one(exp, seed, out, schedule)
        rows.append({"seed": seed, "out": str(out), "completion_rate": summary["completion_rate"],
                     "exit_age_mean": summary["exit_age_mean"], "M_final_mean": summary["M_final_mean"]})
    _emit(rows)
    return 0


def cmd_eval(args) -> int:
    policy, meta = load_checkpoint(args.checkpoint)
    env = EnvConfig.from_dict(meta["eval_env"])
    if args.preset:
        from .presets import get_preset

        env = get_preset(args.preset)
    schedule = ShareSchedule.from_dict(meta["schedule"]) if meta.get("schedule") else None
    cond = meta.get("condition", {})
    episodes = evaluate_policy(policy, env, args.episodes, np.random.default_rng([args.seed, 1]), schedule)
    summary = summarize_seed(
        episodes,
        seed=int(meta.get("seed", args.seed)),
        preset=env.name,
        condition=cond,
        start_age=env.start_age,
        config_hash=meta.get("config_hash", ""),
        profile=greedy_profile(policy, env, schedule),
    )
    if args.out:
        artifacts.atomic_write_json(args.out, summary.to_dict())
    _emit(summary.to_dict())
    return 0


def sweep_plan(exp: ExperimentConfig, base: Path, windows=None, alphas=None, horizons=None) -> list[tuple]:
    """(experiment, seed, out_dir) for every cell of the sweep."""
    jobs = []
    if horizons:
        for H in horizons:
            cell = replace(exp, condition=replace(exp.condition, train_horizon=int(H)))
            for seed in exp.seeds:
                jobs.append((cell, seed, base / f"H{H}" / f"seed{seed}"))
        return jobs
    windows = windows or [exp.env.role.window]
    alphas = alphas or [exp.env.role.alpha]
    for W, a in itertools.product(windows, alphas):
        overrides = json.loads(json.dumps(exp.env_overrides))
        overrides.setdefault("role", {}).update(window=int(W), alpha=float(a))
        cell = replace(exp, env_overrides=overrides)
        cell.env  # validate
        for seed in exp.seeds:
            jobs.append((cell, seed, base / f"W{W}_alpha{a:g}" / f"seed{seed}"))
    return jobs


def cmd_sweep(args) -> int:
    exp = _train_experiment(args)
    if args.seeds is not None:
        exp = replace(exp, seeds=list(args.seeds))
    if args.horizons and (args.windows or args.alphas):
        raise UsageError("a sweep is over either horizons or the role grid, not both")
    schedule = _load_schedule(args.schedule)
    base = Path(args.out or exp.output_dir or output_root() / exp.preset / f"sweep_{exp.condition.kind}")
    plan = sweep_plan(exp, base, args.windows, args.alphas, args.horizons)
    if args.dry_run:
        _emit({"runs": len(plan), "dirs": [str(p[2]) for p in plan]})
        return 0
    jobs = [(cell, seed, out, schedule) for cell, seed, out in plan]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_run_job, jobs))
    else:
        results = [_run_job(j) for j in jobs]
    _emit({"runs": len(results), "completion": [r["completion_rate"] for r in results]})
    return 0


def cmd_cmaes(args) -> int:
    exp = _experiment_from_args(args)
    env = exp.env if args.horizon is None else exp.env.with_updates(horizon=args.horizon)
    cma = CmaConfig.for_schedule(env.horizon, popsize=args.popsize, generations=args.generations, seed=args.seed)
    result, schedule, metrics = optimize_schedule(env, cma)
    digest = config_hash({"env": env.to_dict(), "cma": {"popsize": cma.popsize, "generations": cma.generations, "seed": cma.seed}})
    out = Path(args.out or output_root() / exp.preset / "cmaes" / f"seed{args.seed}")
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(result.history[0]), lineterminator="\n")
    writer.writeheader()
    writer.writerows(result.history)
    artifacts.write_artifacts(
        out,
        config_hash=digest,
        summary={"best_score": result.best_score, **metrics, "config_hash": digest},
        extra_files={
            "schedule.json": (json.dumps({"schedule": schedule.to_dict(), "config_hash": digest}, indent=2) + "\n").encode(),
            "generations.csv": buf.getvalue().encode(),
        },
    )
    _emit({"out": str(out), "best_score": result.best_score, **metrics})
    return 0


def _synth_params(args) -> MinimalMdpParams:
    return MinimalMdpParams(args.kappa, args.beta, args.e_low, args.e_high, args.horizon)


def _write_csv(rows: list[dict], out: str | None) -> None:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]) if rows else [], lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    if out:
        artifacts.atomic_write_bytes(out, buf.getvalue().encode())
    sys.stdout.write(buf.getvalue())


def cmd_synth(args) -> int:
    if args.what == "h-star":
        rows = []
        for kappa in args.kappas:
            p = MinimalMdpParams(kappa, args.beta, args.e_low, args.e_high, args.horizon)
            rows.append({"kappa": kappa, "beta": p.beta, "e_low": p.e_low, "e_high": p.e_high, "h_star": h_star(p)})
        _write_csv(rows, args.out)
        return 0
    if args.what == "gap":
        p = _synth_params(args)
        q_high, q_low, gap = exact_q_origin(p)
        v_high, v_low = continuation_values(p)
        _write_csv([{"kappa": p.kappa, "beta": p.beta, "e_low": p.e_low, "e_high": p.e_high, "H": p.horizon,
                     "q_high": q_high, "q_low": q_low, "gap": gap,
                     "step0_gradient": expected_step0_gradient(p),
                     "continuation_difference": abs(v_high - v_low),
                     "lipschitz_bound": lipschitz_bound(p), "h_star": h_star(p)}], args.out)
        return 0
    rows = commitment_sweep(sweep_grid(args.kappas, range(2, args.max_horizon + 1), args.beta, args.e_low, args.e_high))
    failures = 0
    for i, row in enumerate(rows):
        p = MinimalMdpParams(row["kappa"], row["beta"], row["e_low"], row["e_high"], row["H"])
        est, se = mc_step0_gradient(p, args.samples, seed=args.seed + i)
        row["mc_gradient"], row["mc_se"] = est, se
        row["mc_ok"] = abs(est - row["gap"] / 4) <= 3 * se
        row["commitment_ok"] = row["gap_positive"] or not row["within_h_star"]
        failures += (not row["mc_ok"]) + (not row["commitment_ok"])
    _write_csv(rows, args.out)
    print(f"# cases={len(rows)} failures={failures}", file=sys.stderr)
    return 0 if failures == 0 else 1


REPORT_COLUMNS = ("preset", "condition", "n_seeds", "completion_mean", "exit_age_mean", "exit_age_sd",
                  "M_final_mean", "M_final_sd", "delta_M_final", "cell_A", "cell_B", "cell_C", "reactive")


def _condition_label(cond: dict) -> str:
    label = cond.get("kind", "?")
    if cond.get("zero_proxy"):
        label += "+zero_proxy"
    if cond.get("train_horizon"):
        label += f"+H{cond['train_horizon']}"
    if cond.get("penalty_weight"):
        label += f"+w{cond['penalty_weight']:g}"
    return label


def build_report(root: str | Path, dp_M_final: dict[str, float] | None = None) -> list[dict]:
    """Table rows grouped by (preset, condition), from summary.json files alone."""
    groups: dict[tuple[str, str], list] = {}
    for path in sorted(Path(root).rglob("summary.json")):
        data = json.loads(path.read_text())
        if "seed" not in data:
            continue
        s = read_summary(path)
        groups.setdefault((s.preset, _condition_label(s.condition)), []).append(s)
    rows = []
    for (preset, label), summaries in sorted(groups.items()):
        agg = aggregate_summaries(summaries, (dp_M_final or {}).get(preset))
        cells = agg.pop("cells")
        rows.append({"preset": preset, "condition": label, **agg,
                     "cell_A": cells["A"], "cell_B": cells["B"], "cell_C": cells["C"]})
    return rows


def cmd_report(args) -> int:
    dp = {}
    for item in args.dp_m_final or []:
        preset, _, value = item.partition("=")
        dp[preset] = float(value)
    rows = build_report(args.root, dp)
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=REPORT_COLUMNS, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    if args.csv:
        artifacts.atomic_write_bytes(args.csv, buf.getvalue().encode())
    widths = [max(len(c), 10) for c in REPORT_COLUMNS]
    print("  ".join(c.ljust(w) for c, w in zip(REPORT_COLUMNS, widths)))
    for row in rows:
        cells = [f"{row[c]:.3f}" if isinstance(row[c], float) else str(row[c]) for c in REPORT_COLUMNS]
        print("  ".join(v.ljust(w) for v, w in zip(cells, widths)))
    return 0


# ---------------------------------------------------------------------------
# parser


def _add_experiment_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="experiment config file (JSON)")
    p.add_argument("--preset", choices=PRESET_IDS)


def _add_train_args(p: argparse.ArgumentParser) -> None:
    _add_experiment_args(p)
    p.add_argument("--condition", choices=[k.replace("_", "-") for k in CONDITION_KINDS])
    p.add_argument("--no-exit", action="store_true", help="disable role/capacity exits in training rollouts")
    p.add_argument("--penalty-weight", type=float)
    p.add_argument("--zero-proxy", action="store_true")
    p.add_argument("--init-bias", type=float, help="initial effort-head bias (logit)")
    p.add_argument("--horizon", type=int, help="training horizon; evaluation stays on the full career")
    p.add_argument("--steps", type=int)
    p.add_argument("--schedule", help="DP schedule.json (required for fixed-share conditions)")
    p.add_argument("--out")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="damagelab", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("dp-solve", help="backward induction and reference schedule")
    _add_experiment_args(p)
    p.add_argument("--horizon", type=int)
    p.add_argument("--grid-step", type=float)
    p.add_argument("--out")
    p.set_defaults(func=cmd_dp_solve)

    p = sub.add_parser("dp-eval", help="reference rollout from a saved value table")
    p.add_argument("--table", required=True)
    p.add_argument("--out", help="trajectory CSV path")
    p.set_defaults(func=cmd_dp_eval)

    p = sub.add_parser("train", help="train one or more seeds")
    _add_train_args(p)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint with exits enforced")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--episodes", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--preset", choices=PRESET_IDS, help="override the evaluation environment")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="role-grid or horizon sweep")
    _add_train_args(p)
    p.add_argument("--seeds", type=int, nargs="+")
    p.add_argument("--windows", type=int, nargs="+")
    p.add_argument("--alphas", type=float, nargs="+")
    p.add_argument("--horizons", type=int, nargs="+")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--dry-run", action="store_true")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("cmaes", help="schedule search with CMA-ES")
    _add_experiment_args(p)
    p.add_argument("--horizon", type=int)
    p.add_argument("--popsize", type=int, default=50)
    p.add_argument("--generations", type=int, default=300)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_cmaes)

    p = sub.add_parser("synth", help="minimal binary-effort MDP")
    p.add_argument("what", choices=("h-star", "gap", "verify"))
    p.add_argument("--kappa", type=float, default=0.075)
    p.add_argument("--kappas", type=float, nargs="+", default=[0.05, 0.075, 0.1, 0.15])
    p.add_argument("--beta", type=float, default=0.6)
    p.add_argument("--e-low", type=float, default=0.05)
    p.add_argument("--e-high", type=float, default=1.0)
    p.add_argument("--horizon", type=int, default=10)
    p.add_argument("--max-horizon", type=int, default=30)
    p.add_argument("--samples", type=int, default=100_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="also write the CSV table here")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("report", help="aggregate summary.json files into a table")
    p.add_argument("root")
    p.add_argument("--dp-m-final", nargs="*", metavar="PRESET=VALUE")
    p.add_argument("--csv")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"damagelab: error: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, DPReferenceError, FileNotFoundError, ValueError) as exc:
        print(f"damagelab: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
