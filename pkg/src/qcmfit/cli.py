"""Command-line entry point: one subcommand per stage plus ``pipeline``.

Exit codes: 0 success, 2 configuration error, 3 stage error.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import bvd, features, kanazawa, lineshape, outliers, pipeline, regression
from .pipeline import ConfigError, StageError
from .spectra import load_descriptors, load_sweeps, save_descriptors, save_sweeps

EXIT_OK, EXIT_CONFIG, EXIT_STAGE = 0, 2, 3


def _global_flags(p, default):
    p.add_argument("--config", default=default, help="flat key = value config file")
    p.add_argument("--seed", type=int, default=default, help="master seed")
    p.add_argument("--out-dir", default=default, help="output directory")
    p.add_argument("--threads", type=int, default=default, help="worker processes for fitting")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qcmfit", description=__doc__.splitlines()[0])
    _global_flags(parser, None)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_):
        p = sub.add_parser(name, help=help_)
        _global_flags(p, argparse.SUPPRESS)
        return p

    p = add("simulate", "synthesize BvD sweeps and targets")
    p.add_argument("--rounds", type=int)
    p.add_argument("--noise", type=float, help="relative noise on Z")

    p = add("fit", "fit sweeps into descriptors")
    p.add_argument("--sweeps", required=True)
    p.add_argument("--targets", required=True)
    p.add_argument("--bounds", help="bounds.csv; omitted means unbounded fits")
    p.add_argument("--qc-threshold", type=float)

    p = add("derive-bounds", "percentile bounds from unbounded descriptors")
    p.add_argument("--descriptors", required=True)

    p = add("qc", "list fits below the R^2 threshold")
    p.add_argument("--fit-report", required=True)
    p.add_argument("--threshold", type=float)

    p = add("outliers", "consensus outlier screening")
    p.add_argument("--descriptors", required=True)
    p.add_argument("--alpha", type=float)
    p.add_argument("--tau", type=float)
    p.add_argument("--auto-alpha", action="store_true")

    p = add("rank", "mRMR ranking and correlation matrix")
    p.add_argument("--descriptors", required=True)

    p = add("train", "cross-validated regression")
    p.add_argument("--descriptors", required=True)
    p.add_argument("--outlier-report")
    p.add_argument("--k-grid", help="comma-separated, e.g. 1,5,20,52")
    p.add_argument("--families", help="comma-separated subset of " + ",".join(regression.FAMILIES))

    p = add("kanazawa", "half-bandwidth baseline from conductance sweeps")
    p.add_argument("--sweeps", required=True)
    p.add_argument("--calibration")

    p = add("compare", "cumulative RMSE of impedance model against the baseline")
    p.add_argument("--descriptors", required=True)
    p.add_argument("--predictions", required=True)
    p.add_argument("--kanazawa", required=True)
    p.add_argument("--outlier-report", help="rows removed before training")
    p.add_argument("--no-figures", action="store_true")

    p = add("pipeline", "run every stage end to end")
    p.add_argument("--skip-simulate", action="store_true", help="ingest --sweeps/--targets instead")
    p.add_argument("--sweeps")
    p.add_argument("--targets")
    p.add_argument("--no-figures", action="store_true")
    return parser


def _overrides(args) -> dict:
    """Command-line values as typed config overrides."""
    table = {
        "seed": "run.seed", "out_dir": "run.out_dir", "threads": "run.threads",
        "rounds": "simulate.rounds", "noise": "simulate.noise_rel",
        "qc_threshold": "fit.qc_threshold", "threshold": "fit.qc_threshold",
        "alpha": "outliers.alpha", "tau": "outliers.tau",
        "calibration": "kanazawa.calibration",
        "sweeps": "run.sweeps", "targets": "run.targets",
    }
    out = {}
    for attr, key in table.items():
        v = getattr(args, attr, None)
        if v is not None:
            out[key] = v
    if getattr(args, "auto_alpha", False):
        out["outliers.auto_alpha"] = True
    if getattr(args, "skip_simulate", False):
        out["run.skip_simulate"] = True
    if getattr(args, "no_figures", False):
        out["run.figures"] = False
    for attr, key in (("k_grid", "train.k_grid"), ("families", "train.families")):
        v = getattr(args, attr, None)
        if v is not None:
            out[key] = v  # text, coerced like a config value
    if getattr(args, "bounds", None):
        out["fit.bounds"] = args.bounds
    return out


def _require(*paths):
    for p in paths:
        if p and not Path(p).is_file():
            raise ConfigError(f"no such input file: {p}")


def _out(cfg) -> Path:
    out = Path(cfg.run.out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {out}: {exc.strerror}") from None
    return out


def _run(stage, fn):
    try:
        return fn()
    except (ConfigError, StageError):
        raise
    except Exception as exc:
        raise StageError(stage, exc) from exc


def _print(doc):
    print(json.dumps(doc, indent=1, sort_keys=True))


# -- subcommands ------------------------------------------------------------

def cmd_simulate(args, cfg):
    out = _out(cfg)
    sweeps, rounds = _run("simulate", lambda: pipeline.simulate_stage(
        cfg.simulate, pipeline.stage_seed(cfg.run.seed, "simulate")))
    save_sweeps(sweeps, out / "sweeps.csv")
    bvd.save_targets(rounds, out / "targets.csv")
    _print({"rounds": len(rounds), "sweeps": len(sweeps)})


def cmd_fit(args, cfg):
    _require(args.sweeps, args.targets, args.bounds)
    out = _out(cfg)

    def work():
        sweeps = load_sweeps(args.sweeps)
        t, y = bvd.load_targets(args.targets)
        targets = pipeline.round_targets(sweeps, t, y)
        bounds = lineshape.load_bounds(args.bounds) if args.bounds else None
        fcfg = replace(cfg.fit, bounded=False)
        return pipeline.fit_stage(sweeps, targets, fcfg, bounds, cfg.run.threads)
    res = _run("fit", work)
    save_descriptors(res.matrix, out / "descriptors.csv")
    pipeline.save_fit_report(res.records, res.failures, out / "fit_report.csv")
    pipeline.save_qc_report(res.drops, res.failures, out / "qc_report.csv")
    _print({"rows": res.matrix.rows, "dropped_rounds": res.dropped_rounds,
            "qc_drops": len(res.drops), "fit_failures": len(res.failures)})


def cmd_derive_bounds(args, cfg):
    _require(args.descriptors)
    out = _out(cfg)
    b = _run("derive-bounds", lambda: pipeline.bounds_from_descriptors(
        load_descriptors(args.descriptors), cfg.fit.q_low, cfg.fit.q_high))
    lineshape.save_bounds(b, out / "bounds.csv")
    _print({"degenerate": {k.value: list(v) for k, v in b.degenerate.items()}})


def cmd_qc(args, cfg):
    _require(args.fit_report)
    out = _out(cfg)
    rows = _run("qc", lambda: pipeline.load_fit_report(args.fit_report))
    drops = [lineshape.QcDrop(r["kind"], r["round"], r["r2"]) for r in rows
             if not r["r2"] >= cfg.fit.qc_threshold]
    pipeline.save_qc_report(drops, [], out / "qc_report.csv")
    _print({"records": len(rows), "dropped": len(drops)})


def cmd_outliers(args, cfg):
    _require(args.descriptors)
    out = _out(cfg)
    matrix = _run("outliers", lambda: load_descriptors(args.descriptors))
    res = _run("outliers", lambda: pipeline.outlier_stage(
        matrix.X, cfg.outliers, pipeline.stage_seed(cfg.run.seed, "outliers")))
    outliers.save_report(res.scores, res.result, out / "outlier_report.csv")
    outliers.save_alpha_sweep(res.alphas, res.counts, out / "alpha_sweep.csv")
    save_descriptors(matrix.subset(~res.result.flags), out / "descriptors_clean.csv")
    _print(res.summary())


def cmd_rank(args, cfg):
    _require(args.descriptors)
    out = _out(cfg)

    def work():
        m = load_descriptors(args.descriptors)
        return m, features.mrmr_rank(m.X, m.y, cfg=features.MiConfig(cfg.rank.bins)), \
            features.pearson_matrix(m.X)[0]
    m, res, R = _run("rank", work)
    features.save_ranking(res, m.names, out / "ranking.csv")
    features.save_matrix(R, m.names, out / "correlation.csv")
    _print({"top": res.names(m.names)[:10]})


def _clean_matrix(descriptors, outlier_report):
    m = load_descriptors(descriptors)
    if outlier_report:
        flags = outliers.load_flags(outlier_report)
        if flags.size != m.rows:
            raise ValueError(f"outlier report has {flags.size} rows, descriptors have {m.rows}")
        m = m.subset(~flags)
    return m


def cmd_train(args, cfg):
    _require(args.descriptors, args.outlier_report)
    out = _out(cfg)

    def work():
        m = _clean_matrix(args.descriptors, args.outlier_report)
        return m, pipeline.train_stage(m, cfg.train, cfg.rank.bins,
                                       pipeline.stage_seed(cfg.run.seed, "train"))
    m, rep = _run("train", work)
    (out / "cv_report.json").write_text(rep.to_json(m.names) + "\n")
    regression.save_topk_curve(regression.topk_curve(rep), out / "topk_curve.csv")
    regression.save_predictions(m.y, rep.predictions, out / "predictions.csv")
    _print({"best": {"family": rep.best[0], "k": rep.best[1]}, **rep.aggregates[rep.best]})


def cmd_kanazawa(args, cfg):
    _require(args.sweeps, cfg.kanazawa.calibration)
    out = _out(cfg)
    points, skipped = _run("kanazawa", lambda: pipeline.kanazawa_stage(
        load_sweeps(args.sweeps), cfg.kanazawa))
    kanazawa.save_predictions(points, out / "kanazawa_predictions.csv")
    _print({"points": len(points), "skipped": [{"round": r, "reason": why} for r, why in skipped]})


def cmd_compare(args, cfg):
    _require(args.descriptors, args.predictions, args.kanazawa, args.outlier_report)
    out = _out(cfg)

    def work():
        m = _clean_matrix(args.descriptors, args.outlier_report)
        y, pred = pipeline.load_oof_predictions(args.predictions)
        if y.size != m.rows or not np.allclose(y, m.y):
            raise ValueError("predictions do not line up with the (screened) descriptor rows")
        kt, kp = kanazawa.load_predictions(args.kanazawa)
        return m, pred, pipeline.compare(m.timestamps, pred, m.y, kt, kp, cfg.compare.step), (kt, kp)
    m, pred, rep, (kt, kp) = _run("compare", work)
    pipeline.save_compare(rep, out / "compare.csv", out / "compare.json")
    if cfg.run.figures:
        from . import plotting
        fig_dir = out / "figures"
        fig_dir.mkdir(exist_ok=True)
        plotting.plot_cumulative_rmse(rep, fig_dir / "cumulative_rmse.png")
        plotting.plot_series(m.timestamps, m.y, pred, kt, kp, fig_dir / "predictions.png")
    _print(rep.to_dict())


def cmd_pipeline(args, cfg):
    res = pipeline.run_pipeline(cfg)
    doc = dict(res.summary)
    if res.report is not None:
        doc["compare"] = {"rmse_impedance": res.report.rmse_impedance,
                          "rmse_kanazawa": res.report.rmse_kanazawa}
    _print(doc)


COMMANDS = {
    "simulate": cmd_simulate, "fit": cmd_fit, "derive-bounds": cmd_derive_bounds, "qc": cmd_qc,
    "outliers": cmd_outliers, "rank": cmd_rank, "train": cmd_train, "kanazawa": cmd_kanazawa,
    "compare": cmd_compare, "pipeline": cmd_pipeline,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = pipeline.load_config(args.config, _overrides(args))
        if args.command == "pipeline":
            pipeline.validate_config(cfg)
        COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except OSError as exc:
        print(f"error: cannot write output: {exc}", file=sys.stderr)
        return EXIT_STAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
