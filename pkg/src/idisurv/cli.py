"""Command-line entry point: ``idisurv analyze|simulate|diagnose``.

Exit codes: 0 on success, 1 when the statistical pipeline fails, 2 when the
input files, config or output directory are unusable.
"""

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import io as fileio
from .errors import IdiError, InputError
from .idi import IdiConfig, bootstrap_idi, compute_diagnostics
from .simbench import (ScenarioParams, gen_population, power_csv, power_curve,
                       run_mc_study, table_csv, _replicate_seeds)

EXIT_OK, EXIT_PIPELINE, EXIT_INPUT = 0, 1, 2


def _parser():
    parser = argparse.ArgumentParser(prog="idisurv",
                                     description="Index date imputation for externally "
                                                 "controlled survival studies.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="JSON run configuration")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--threads", type=int, help="worker processes (default: all cores)")
        p.add_argument("--out-dir", help="override the config output_dir")

    p = sub.add_parser("analyze", help="run the bootstrap IDI analysis on a cohort CSV")
    p.add_argument("cohort")
    common(p)
    p = sub.add_parser("diagnose", help="balance and index-time diagnostics for a cohort CSV")
    p.add_argument("cohort")
    common(p)
    p = sub.add_parser("simulate", help="Monte Carlo study from the config's scenario block")
    common(p)
    p.add_argument("--reps", type=int, help="override the number of replicates")
    p.add_argument("--methods", help="comma-separated subset of naive,matching,weighting")
    p.add_argument("--emit-cohort", metavar="PATH",
                   help="also write the first replicate's generated cohort as CSV")
    return parser


def _settings(args):
    cfg = fileio.load_config(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.out_dir is not None:
        cfg["output_dir"] = args.out_dir
    threads = args.threads or cfg.get("threads") or os.cpu_count() or 1
    if threads < 1:
        raise InputError("--threads must be positive")
    cfg["threads"] = threads
    if cfg["seed"] < 0:
        raise InputError("--seed must be nonnegative")
    return cfg


def _idi_config(cfg):
    return IdiConfig(adjustment=cfg["adjustment"], covariate_names=tuple(cfg["covariates"]),
                     bootstrap_B=cfg["B"], seed=cfg["seed"], caliper=cfg["caliper"],
                     zeta_cap=cfg["zeta_cap"])


def _out_dir(cfg):
    out = Path(cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write(path, text):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def cmd_analyze(args, cfg):
    cohort = fileio.read_cohort(args.cohort, cfg["covariates"] or None)
    out = _out_dir(cfg)
    result = bootstrap_idi(cohort, _idi_config(cfg), n_jobs=cfg["threads"])
    _write(out / "result.json", result.to_json() + "\n")
    _write(out / "summary.txt", result.summary())
    _write(out / "balance.csv", result.diagnostics.balance.to_csv(flags=True))
    _write(out / "qq.csv", fileio.qq_csv(result.diagnostics.qq))
    print(result.summary(), end="")


def cmd_diagnose(args, cfg):
    cohort = fileio.read_cohort(args.cohort, cfg["covariates"] or None)
    out = _out_dir(cfg)
    diag = compute_diagnostics(cohort, _idi_config(cfg))
    _write(out / "smd_before_after.csv", diag.balance.to_csv(flags=True))
    _write(out / "qq_points.csv", fileio.qq_csv(diag.qq))
    _write(out / "love_plot.svg", fileio.love_plot_svg(diag.balance))
    _write(out / "qq_plot.svg", fileio.qq_plot_svg(diag.qq))
    failing = [n for n, ok in zip(diag.balance.names, diag.balance.passes()) if not ok]
    print("all covariates balanced" if not failing
          else f"imbalanced after adjustment: {', '.join(failing)}")


def cmd_simulate(args, cfg):
    if "scenario" not in cfg:
        raise InputError("simulate needs a 'scenario' block in the config")
    scenario = ScenarioParams.from_dict(cfg["scenario"])
    reps = args.reps if args.reps is not None else cfg["reps"]
    if reps < 2:
        raise InputError("--reps must be at least 2")
    methods = cfg["methods"]
    if args.methods:
        methods = [m.strip() for m in args.methods.split(",") if m.strip()]
        bad = sorted(set(methods) - {"naive", "matching", "weighting"})
        if bad or not methods:
            raise InputError(f"unknown methods: {bad or args.methods!r}")
    out = _out_dir(cfg)
    if args.emit_cohort:
        gen_ss, _ = _replicate_seeds(cfg["seed"], 0)
        fileio.write_cohort(gen_population(scenario, np.random.default_rng(gen_ss)),
                            args.emit_cohort)
    kwargs = dict(methods=methods, n_reps=reps, seed=cfg["seed"], bootstrap_B=cfg["B"],
                  n_jobs=cfg["threads"], oracle_n=cfg["oracle_n"], caliper=cfg["caliper"])
    grid = cfg.get("alpha_grid")
    if grid:
        curve = power_curve(scenario, grid, **kwargs)
        _write(out / "table.csv", table_csv(curve.studies))
        _write(out / "power.csv", power_csv(curve))
    else:
        study = run_mc_study(scenario, **kwargs)
        _write(out / "table.csv", table_csv({scenario.alpha: study}))
    print(f"wrote {out / 'table.csv'}")


COMMANDS = {"analyze": cmd_analyze, "diagnose": cmd_diagnose, "simulate": cmd_simulate}


def _report(error, code, cfg):
    payload = {"exit_code": code, **error.to_dict()}
    text = json.dumps(payload, indent=2)
    print(text, file=sys.stderr)
    if cfg is not None:
        try:
            _write(_out_dir(cfg) / "error.json", text + "\n")
        except OSError:
            pass
    return code


def main(argv=None):
    args = _parser().parse_args(argv)
    cfg = None
    try:
        cfg = _settings(args)
        COMMANDS[args.command](args, cfg)
    except IdiError as exc:
        return _report(exc, EXIT_PIPELINE, cfg)
    except InputError as exc:
        return _report(exc, EXIT_INPUT, cfg)
    except OSError as exc:
        err = InputError(f"{exc.filename or ''}: {exc.strerror or exc}".lstrip(": "))
        return _report(err, EXIT_INPUT, None)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
