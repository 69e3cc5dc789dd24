"""Command-line entry point.

Commands: ``train``, ``evaluate``, ``validate-model`` and ``replay``.
Exit codes: 0 success, 1 validation or assertion failure, 2 configuration
error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time

from .config import load_config, parse_override
from .exceptions import ConfigurationError

__all__ = ["main"]

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2

log = logging.getLogger("mpcrl")


def _parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML run configuration (defaults to the packaged one)")
    common.add_argument("--seed", type=int, help="override the seed used by the command")
    common.add_argument("--jobs", type=int, default=1, help="worker processes (default 1)")
    common.add_argument("--out", help="output directory (overrides output.dir)")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override a configuration value; repeatable")
    common.add_argument("-v", "--verbose", action="store_true")

    ap = argparse.ArgumentParser(prog="mpcrl", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="build safe bounds, Q-tables and the transition database")
    ev = sub.add_parser("evaluate", parents=[common], help="Monte Carlo comparison of the three controllers")
    ev.add_argument("--runs", type=int, help="number of runs (overrides evaluation.n_runs)")
    ev.add_argument("--timeseries", action="store_true", help="also write per-episode time series")
    ev.add_argument("--assert-ordering", action="store_true", help="exit 1 unless the expected ordering holds")
    sub.add_parser("validate-model", parents=[common], help="Taylor two-step and LPV validity checks")
    rp = sub.add_parser("replay", parents=[common], help="re-run a stored episode from its seeds")
    rp.add_argument("run", help="run id from metrics_runs.csv")
    rp.add_argument("--controller", default="MPC-RL", choices=["MPC-RL", "LPV", "RL"])
    return ap


def _load(args):
    overrides = [parse_override(o) for o in args.overrides]
    if args.out:
        overrides.append({"output": {"dir": os.path.abspath(args.out)}})
    cfg = load_config(args.config, overrides)
    if args.seed is not None:
        key = {"train": "train", "evaluate": "evaluate", "validate-model": "validate"}.get(args.command)
        if key:
            cfg = cfg.with_overrides({"seeds": {key: args.seed}})
    if args.command != "validate-model":
        cfg.check_simulable()
    return cfg


def cmd_train(cfg, args):
    from .pipeline import train_artifacts

    out = str(cfg.output_dir)
    t0 = time.perf_counter()
    summary = train_artifacts(cfg, out)
    log.info("trained in %.1f s", time.perf_counter() - t0)
    print(json.dumps(summary, indent=2))
    if summary["certification_failures"]:
        print(f"error: {summary['certification_failures']} certification failures", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


def cmd_evaluate(cfg, args):
    from .pipeline import evaluate

    out = str(cfg.output_dir)
    summary, _, (ok, checks) = evaluate(cfg, out, out, args.seed, args.jobs, args.runs, args.timeseries or None)
    for name, row in summary.items():
        print(f"{name:7s} overshoot_h={row['max_overshoot_h']:.6g} median_du_pct={row['median_du_pct']:.4g} "
              f"fallbacks={row['fallback_count']:.4g} violations={row['violation_count']:.4g}")
    for k, v in checks.items():
        print(f"{k}: {'pass' if v else 'FAIL'}")
    if args.assert_ordering and not ok:
        return EXIT_FAIL
    return EXIT_OK


def cmd_validate_model(cfg, args):
    from .lpv import write_report
    from .pipeline import validate_model

    report = validate_model(cfg, args.seed)
    out = cfg.output_dir
    os.makedirs(out, exist_ok=True)
    path = out / "validation.json"
    write_report(path, report, cfg.config_hash())
    t, lp = report["taylor"], report["lpv"]
    print(f"taylor max_rel_error={t['max_rel_error']:.4g} (< {t['threshold']}): {'pass' if t['passed'] else 'FAIL'}")
    if "max_rel_traj_error" in lp:
        print(f"lpv max_rel_traj_error={lp['max_rel_traj_error']:.4g} (< {lp['threshold']}), "
              f"dominant mode {lp['dominant_mode_hz']:.3f} Hz: {'pass' if lp['passed'] else 'FAIL'}")
    else:
        print(f"lpv: FAIL ({lp['reason']})")
    print(f"report: {path}")
    return EXIT_OK if report["passed"] else EXIT_FAIL


def cmd_replay(cfg, args):
    from .pipeline import replay

    out = str(cfg.output_dir)
    try:
        res = replay(cfg, out, args.run, args.controller)
    except KeyError as exc:
        print(f"error: {exc.args[0]}", file=sys.stderr)
        return EXIT_CONFIG
    print(f"replayed run {args.run} ({args.controller}): {res.sim.n_steps} steps")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "validate-model": cmd_validate_model,
    "replay": cmd_replay,
}


def main(argv=None):
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = _load(args)
        return COMMANDS[args.command](cfg, args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
