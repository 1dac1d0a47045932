"""Command-line entry point; every subcommand writes under --out and updates the manifest."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from vo2fit import cohortgen as cg
from vo2fit import featurize as fz
from vo2fit import pipeline as pl
from vo2fit import sensorproc as sp
from vo2fit.errors import Vo2FitError

log = logging.getLogger("vo2fit")


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", required=True, type=Path, help="YAML run configuration")
    p.add_argument("--seed", type=int, default=None, help="override the configured master seed")
    p.add_argument("--out", type=Path, default=Path("out"), help="run directory (default: ./out)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vo2fit", description="Synthetic VO2max estimation pipeline.")
    sub = parser.add_subparsers(dest="command", required=True)
    common = [_common()]

    sub.add_parser("generate", parents=common, help="simulate the cohort tables")
    p = sub.add_parser("preprocess", parents=common, help="write raw and cleaned minute-level weeks")
    p.add_argument("--ids", nargs="+", help="participant ids (default: the first --limit baseline ids)")
    p.add_argument("--limit", type=int, default=5)
    p.add_argument("--cohort", choices=cg.COHORTS, default="FI")
    sub.add_parser("featurize", parents=common, help="build feature vectors for every eligible week")

    p = sub.add_parser("train", parents=common, help="train one model on the task-1 training split")
    p.add_argument("--covariates", choices=sorted(fz.COVARIATE_SETS), default=pl.FULL_SET)
    p.add_argument("--model", choices=("linear", "dense"), default="dense")
    p.add_argument("--target", choices=("current", "future", "delta"), default="current")
    p = sub.add_parser("evaluate", parents=common, help="evaluate a bundle on its test split")
    p.add_argument("--bundle", type=Path, required=True)
    p = sub.add_parser("latent", parents=common, help="export embeddings and the kNN case study")
    p.add_argument("--bundle", type=Path, default=None, help="regressor bundle (default: task-1 dense)")

    sub.add_parser("task1", parents=common, help="covariate-set comparison for current VO2max")
    sub.add_parser("task2", parents=common, help="present/future/delta models on longitudinal data")
    sub.add_parser("task3", parents=common, help="frozen task-1 model on follow-up weeks")
    sub.add_parser("report", parents=common, help="tables and plot-data CSVs from a finished run")
    return parser


def _preprocess(cfg: pl.Config, out: Path, args) -> list[Path]:
    study = pl.ensure_study(cfg, out)
    people = {(p.id, p.cohort): p for p in study.fi + study.fii}
    ids = args.ids or [p.id for p in (study.fi if args.cohort == "FI" else study.fii)][:args.limit]
    sdir = out / "sensors"
    sdir.mkdir(parents=True, exist_ok=True)
    written = []
    for pid in ids:
        p = people.get((pid, args.cohort))
        if p is None:
            raise Vo2FitError(f"unknown participant {pid} in cohort {args.cohort}")
        if args.cohort == "FII" and pid not in study.fii_with_sensors:
            raise Vo2FitError(f"{pid} has no follow-up sensor week")
        week = cg.generate_sensor_week(p, cg.week_seed(cfg.seed, pid, p.cohort), cfg.population, cfg.sensor)
        raw, clean = sdir / f"{pid}_{p.cohort}_raw.csv", sdir / f"{pid}_{p.cohort}_clean.csv"
        cg.write_sensor_csv(week, raw)
        sp.write_clean_csv(sp.clean_week(week), clean)
        written += [raw, clean]
    pl.write_manifest(out, cfg, f"preprocess:{args.cohort}", {"ids": list(ids), "sensor_seed": cfg.seed})
    return written


def run(args) -> dict:
    cfg = pl.load_config(args.config).with_seed(args.seed)
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    cmd = args.command
    if cmd == "generate":
        study = pl.ensure_study(cfg, out)
        return {"fi": len(study.fi), "fii": len(study.fii), "fii_with_sensors": len(study.fii_with_sensors)}
    if cmd == "preprocess":
        return {"written": [str(p) for p in _preprocess(cfg, out, args)]}
    if cmd == "featurize":
        _, fs = pl.ensure_features(cfg, out)
        return {"fi": len(fs.fi), "fii": len(fs.fii), "excluded": len(fs.excluded)}
    if cmd == "train":
        return {"bundle": str(pl.run_train(cfg, out, args.covariates, args.model, args.target))}
    if cmd == "evaluate":
        rep = pl.run_evaluate(cfg, out, args.bundle)
        return {m: e.to_dict() for m, e in rep.metrics.items()}
    if cmd == "latent":
        table = pl.run_latent(cfg, out, args.bundle)
        return {"queries": sorted(set(table["query"]))}
    if cmd == "task1":
        res = pl.run_task1(cfg, out)
        return {k: r.metrics["r2"].point for k, r in res.reports.items()}
    if cmd == "task2":
        res = pl.run_task2(cfg, out)
        return {k: {m: e.point for m, e in r.metrics.items()} for k, r in res.reports.items()}
    if cmd == "task3":
        return pl.run_task3(cfg, out).report
    if cmd == "report":
        return {k: str(v) for k, v in pl.run_report(cfg, out).items()}
    raise AssertionError(cmd)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        summary = run(args)
    except (Vo2FitError, ValueError, OSError) as exc:
        print(f"vo2fit {args.command}: error: {exc}", file=sys.stderr)
        return 1
    print(json.dumps(summary, indent=1, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
