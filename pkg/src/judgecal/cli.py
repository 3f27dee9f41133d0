"""Command-line entry point.

Each pipeline subcommand runs its prerequisite stages in memory and writes
one JSON artifact per stage into ``--out``. Gate failures are recorded in the
artifacts and never change the exit code; a failing stage exits with status 2
and names the stage on stderr.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from . import planner
from .artifacts import STAGES, StageError, dumps, read_artifact, run_stages, write_report
from .pipeline import ALL_ESTIMATORS, RunConfig
from .sim import SyntheticDGP, write_simulation

PIPELINE_COMMANDS = {
    "ingest": "ingest",
    "calibrate": "calibrate",
    "weights": "weights",
    "estimate": "estimate",
    "stack": "stack",
    "oua": "oua",
    "diagnose": "diagnose",
    "pipeline": "report",
}


def _add_run_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file with RunConfig fields; flags override it")
    p.add_argument("--logs", help="logged-data JSONL")
    p.add_argument("--tf-cache", action="append", help="teacher-forcing JSONL (repeatable)")
    p.add_argument("--fresh-draws", action="append", help="fresh-draw JSONL (repeatable)")
    p.add_argument("--out", help="artifact directory")
    p.add_argument("--K", type=int, help="number of cross-fitting folds")
    p.add_argument("--rho", type=float, help="variance-guard cap")
    p.add_argument("--guard-mode", choices=("absolute", "relative"))
    p.add_argument("--exact-projection", action="store_true", default=None, help="re-project after stacking")
    p.add_argument("--no-baseline", action="store_true", help="drop the constant candidate from the weight stack")
    p.add_argument("--calibration-mode", choices=("auto", "monotone", "two_stage"))
    p.add_argument("--covariates", nargs="*", help="covariate names for the two-stage calibrator")
    p.add_argument("--no-covariates", action="store_true")
    p.add_argument("--no-oua", action="store_true", help="skip the oracle jackknife (intervals become naive)")
    p.add_argument("--oua-folds", type=int, help="jackknife groups for the oracle slice")
    p.add_argument("--estimators", nargs="+", choices=ALL_ESTIMATORS)
    p.add_argument("--level", type=float)
    p.add_argument("--seed", type=int)


def config_from_args(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    updates = {}
    for flag, field_name in (
        ("logs", "logs"),
        ("tf_cache", "tf_cache"),
        ("fresh_draws", "fresh_draws"),
        ("out", "out_dir"),
        ("K", "K"),
        ("rho", "rho"),
        ("guard_mode", "guard_mode"),
        ("exact_projection", "exact_projection"),
        ("calibration_mode", "calibration_mode"),
        ("covariates", "covariates"),
        ("oua_folds", "oua_folds"),
        ("estimators", "estimators"),
        ("level", "level"),
        ("seed", "seed"),
    ):
        v = getattr(args, flag, None)
        if v is not None:
            updates[field_name] = v
    if getattr(args, "no_baseline", False):
        updates["include_baseline"] = False
    if getattr(args, "no_covariates", False):
        updates["use_covariates"] = False
    if getattr(args, "no_oua", False):
        updates["oua"] = False
    return replace(cfg, **updates)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="judgecal", description="Calibrated off-policy evaluation with judge scores.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, stage in PIPELINE_COMMANDS.items():
        p = sub.add_parser(name, help=f"run stages up to {stage}")
        _add_run_args(p)
    p = sub.add_parser("report", help="consolidate existing artifacts into report.json")
    p.add_argument("--out", default="artifacts")

    p = sub.add_parser("plan", help="minimum detectable effect and budget allocation")
    p.add_argument("--se", type=float, help="standard error of one policy value")
    p.add_argument("--power", type=float, default=0.8)
    p.add_argument("--level", type=float, default=0.95)
    p.add_argument("--budget", type=float)
    p.add_argument("--cost-ratio", type=float, help="oracle label cost over surrogate cost (c_Y / c_S)")
    p.add_argument("--c-s", type=float, default=1.0, help="surrogate cost per row")
    p.add_argument("--sigma2-eval", type=float)
    p.add_argument("--sigma2-cal", type=float)
    p.add_argument("--from-run", help="artifact directory to read variances from")
    p.add_argument("--estimator", default="direct", help="estimator whose variances --from-run uses")
    p.add_argument("--policies", type=int, default=1)

    p = sub.add_parser("simulate", help="write a synthetic dataset")
    p.add_argument("--spec", help="JSON file with SyntheticDGP fields")
    p.add_argument("--out", required=True)
    p.add_argument("--cell", type=int, default=0)
    return parser


def _variances_from_run(out_dir: str, estimator: str) -> tuple:
    oua = read_artifact(out_dir, "oua")
    ing = read_artifact(out_dir, "ingest")
    if oua is None or ing is None or oua["content"].get("disabled"):
        raise ValueError(f"{out_dir} lacks ingest/oua artifacts with OUA enabled")
    traces = [t[estimator] for t in oua["content"].values() if estimator in t]
    if not traces:
        raise ValueError(f"no OUA trace for estimator {estimator!r}")
    est_doc = read_artifact(out_dir, "estimate")["content"]
    s_eval, s_cal = [], []
    m = ing["content"]["n_labeled"]
    for p, t in oua["content"].items():
        if estimator not in t:
            continue
        n = est_doc[p]["estimates"][estimator]["n"]
        a, b = planner.variances_from_run(t[estimator]["var_main"], n, t[estimator]["var_cal"], m)
        s_eval.append(a)
        s_cal.append(b)
    return max(s_eval), max(s_cal)


def cmd_plan(args) -> dict:
    out = {}
    if args.se is not None:
        out["mde"] = planner.mde(args.se, args.power, args.level)
    if args.budget is not None:
        if args.cost_ratio is None:
            raise ValueError("--budget needs --cost-ratio")
        if args.from_run:
            s_eval, s_cal = _variances_from_run(args.from_run, args.estimator)
        else:
            if args.sigma2_eval is None or args.sigma2_cal is None:
                raise ValueError("--budget needs --from-run or both --sigma2-eval and --sigma2-cal")
            s_eval, s_cal = args.sigma2_eval, args.sigma2_cal
        c_Y = args.cost_ratio * args.c_s
        plan = planner.allocate_budget_multi_policy(args.c_s, c_Y, s_eval, s_cal, args.budget, args.policies)
        out["plan"] = plan.to_jsonable()
        if plan.m_star > 0:
            se = plan.variance**0.5
            out["mde_at_plan"] = planner.mde(se, args.power, args.level)
    if not out:
        raise ValueError("nothing to plan: give --se and/or --budget")
    return out


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    cmd = args.command
    try:
        if cmd in PIPELINE_COMMANDS:
            cfg = config_from_args(args)
            docs = run_stages(cfg, PIPELINE_COMMANDS[cmd])
            summary = {s: str(Path(cfg.out_dir) / f"{s}.json") for s in STAGES if s in docs}
            print(json.dumps(summary, indent=1))
        elif cmd == "report":
            write_report(args.out)
            print(str(Path(args.out) / "report.json"))
        elif cmd == "plan":
            sys.stdout.write(dumps(cmd_plan(args)))
        elif cmd == "simulate":
            spec = {}
            if args.spec:
                spec = json.loads(Path(args.spec).read_text(encoding="utf-8"))
            dgp = SyntheticDGP.from_jsonable(spec)
            dgp.validate()
            print(json.dumps(write_simulation(dgp, args.out, args.cell), indent=1))
    except StageError as exc:
        print(f"judgecal: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as exc:
        print(f"judgecal {cmd}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
