"""Command-line entry point.

Exit codes: 0 success, 1 runtime failure (including a failed ``--check``),
2 configuration error.  Every subcommand computes all of its outputs before
writing any file, so a failing run leaves the output directory untouched.
The default output directory comes from ``TCLGRID_OUTDIR`` (else ``./out``).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import harness
from .errors import ConfigError
from .grid import SHAPES, feeder_to_dict, generate_feeder, scale_to_min_voltage
from .streams import CURVE, Streams
from .utility import acceptance_study, estimate_safety_curve, minimal_samples, render_curve_csv

EXIT_OK, EXIT_FAILURE, EXIT_CONFIG = 0, 1, 2
OUTDIR_ENV = "TCLGRID_OUTDIR"

log = logging.getLogger("tclgrid")


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage errors as configuration errors."""

    def error(self, message):
        raise ConfigError(message)


def _nonnegative_int(text):
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError("must be >= 0")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tclgrid", description="Network-safe TCL coordination simulator.")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required, help="scenario JSON file")
        p.add_argument("--outdir", help=f"output directory (default: ${OUTDIR_ENV} or ./out)")

    p = sub.add_parser("simulate", help="run one closed-loop scenario")
    common(p)
    p.add_argument("--seed", type=_nonnegative_int, help="override the config seed")
    p.add_argument("--controller", choices=harness.CONTROLLERS, help="override the config controller")

    p = sub.add_parser("compare", help="run every controller over a seed list")
    common(p)
    p.add_argument("--seeds", type=_nonnegative_int, nargs="*", help="seed list (default: the config seed)")
    p.add_argument("--check", action="store_true", help="exit 1 if the expected orderings do not hold")

    p = sub.add_parser("safety-curve", help="Monte-Carlo safety probability against the command")
    common(p)
    p.add_argument("--seed", type=_nonnegative_int, help="override the config seed")
    p.add_argument("--points", type=int, default=101, help="uniform u-points on [-1, 1] (default 101)")
    p.add_argument("--n-s", type=int, default=10_000, help="samples per point (default 10000)")
    p.add_argument("--hour", type=float, help="hour of the snapshot (default: load peak)")

    p = sub.add_parser("validate-theorem1", help="acceptance study against synthetic Bernoulli streams")
    p.add_argument("--outdir", help=f"output directory (default: ${OUTDIR_ENV} or ./out)")
    p.add_argument("--epsilon", type=float, default=0.05)
    p.add_argument("--beta", type=float, default=0.001)
    p.add_argument("--nu", type=float, default=0.90, help="true safety probability of the stream")
    p.add_argument("--trials", type=int, default=10_000)
    p.add_argument("--max-samples", type=int, default=100_000)
    p.add_argument("--batch-size", type=int, default=2000)
    p.add_argument("--seed", type=_nonnegative_int, default=0)

    p = sub.add_parser("gen-feeder", help="write a synthetic radial feeder as JSON")
    p.add_argument("--outdir", help=f"output directory (default: ${OUTDIR_ENV} or ./out)")
    p.add_argument("--output", default="feeder.json", help="file name inside the output directory")
    p.add_argument("--shape", choices=SHAPES, default="branched")
    p.add_argument("--nodes", type=int, default=8)
    p.add_argument("--seed", type=_nonnegative_int, default=0)
    p.add_argument("--target-min-voltage", type=float,
                   help="rescale impedances so the minimum voltage hits this value")
    p.add_argument("--calibration-multiplier", type=float, default=0.675,
                   help="load multiplier used with --target-min-voltage")
    return parser


def _outdir(args) -> Path:
    return Path(args.outdir or os.environ.get(OUTDIR_ENV) or "out")


def _write_all(outdir: Path, files: dict[str, str]) -> None:
    outdir.mkdir(parents=True, exist_ok=True)
    for name, text in files.items():
        (outdir / name).write_text(text, encoding="utf-8")


def _load(args) -> harness.ScenarioConfig:
    cfg = harness.load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def cmd_simulate(args) -> int:
    cfg = _load(args)
    if args.controller:
        cfg = replace(cfg, controller=args.controller)
    scenario = harness.build_scenario(cfg)
    result = harness.run_scenario(cfg, scenario)
    files = {
        "results.jsonl": harness.render_results(result),
        "summary.csv": harness.render_summary([harness.summary_row(result, cfg)]),
        "trace.csv": harness.render_trace(result),
    }
    if result.constraints:
        files["constraints.jsonl"] = "".join(json.dumps(r, sort_keys=True) + "\n" for r in result.constraints)
    _write_all(_outdir(args), files)
    log.info("%s", result.summary)
    return EXIT_OK


def cmd_compare(args) -> int:
    cfg = _load(args)
    seeds = [cfg.seed] if args.seeds is None else args.seeds
    per_seed: list[dict] = []
    rows = harness.compare_controllers(cfg, seeds, per_seed=per_seed)
    problems = harness.check_ordering(rows)
    _write_all(_outdir(args), {
        "comparison.csv": harness.render_comparison(rows),
        "runs.csv": harness.render_summary(per_seed),
    })
    for row in rows:
        log.info("%s: rmse=%.3f kW safety=%.4f", row.label, row.rmse_kW, row.empirical_safety_probability)
    if args.check and problems:
        for msg in problems:
            print(f"ordering check failed: {msg}", file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_OK


def cmd_safety_curve(args) -> int:
    if args.points < 1:
        raise ConfigError("--points must be >= 1")
    if args.n_s < 1:
        raise ConfigError("--n-s must be >= 1")
    cfg = _load(args)
    scenario = harness.build_scenario(cfg)
    obs = harness.snapshot_observation(scenario, args.hour)
    grid = np.linspace(-1.0, 1.0, args.points) if args.points > 1 else np.array([0.0])
    points = estimate_safety_curve(obs, scenario.load, cfg.safety, scenario.feeder, grid, args.n_s,
                                   Streams(cfg.seed, (CURVE,)))
    _write_all(_outdir(args), {"safety_curve.csv": render_curve_csv(points)})
    return EXIT_OK


def cmd_validate_confidence_test(args) -> int:
    if args.trials < 1:
        raise ConfigError("--trials must be >= 1")
    if not (0 < args.epsilon < 1 and 0 < args.beta < 1):
        raise ConfigError("--epsilon and --beta must lie in (0, 1)")
    if args.max_samples < 1 or args.batch_size < 1:
        raise ConfigError("--max-samples and --batch-size must be positive")
    study = acceptance_study(args.epsilon, args.beta, args.nu, args.trials, args.seed, args.max_samples,
                           args.batch_size)
    report = {
        "epsilon": study.epsilon, "beta": study.beta, "nu_true": study.nu_true, "trials": study.trials,
        "accepted": study.accepted, "acceptance_rate": study.acceptance_rate,
        "mean_samples": study.mean_samples, "max_samples": study.max_samples,
        "minimal_samples": minimal_samples(args.epsilon, args.beta), "seed": args.seed,
    }
    _write_all(_outdir(args), {"acceptance_study.json": json.dumps(report, indent=2, sort_keys=True) + "\n"})
    print(f"acceptance rate {study.acceptance_rate:.6f} ({study.accepted}/{study.trials})")
    return EXIT_OK


def cmd_gen_feeder(args) -> int:
    if Path(args.output).name != args.output:
        raise ConfigError("--output must be a plain file name")
    feeder = generate_feeder(args.shape, args.nodes, args.seed)
    if args.target_min_voltage is not None:
        feeder = scale_to_min_voltage(feeder, args.calibration_multiplier, args.target_min_voltage)
    _write_all(_outdir(args), {args.output: json.dumps(feeder_to_dict(feeder), indent=2) + "\n"})
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "compare": cmd_compare,
    "safety-curve": cmd_safety_curve,
    "validate-theorem1": cmd_validate_confidence_test,
    "gen-feeder": cmd_gen_feeder,
}


def _error(kind: str, exc: BaseException, code: int) -> int:
    record = {"error": kind, "type": type(exc).__name__, "message": str(exc), "exit_code": code}
    print(json.dumps(record, sort_keys=True), file=sys.stderr)
    return code


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except ConfigError as exc:
        return _error("config", exc, EXIT_CONFIG)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        return _error("config", exc, EXIT_CONFIG)
    except Exception as exc:  # noqa: BLE001 - every failure maps to an exit code
        log.debug("run failed", exc_info=True)
        return _error("runtime", exc, EXIT_FAILURE)


if __name__ == "__main__":
    sys.exit(main())
