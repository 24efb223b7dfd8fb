"""Command line entry point ``dopinv``.

Examples
--------
::

    dopinv full --config exp.cfg --set device.U=5
    dopinv forward --config exp.cfg
    dopinv invert --config exp.cfg --observations data/observations.csv
    dopinv sweep --config exp.cfg --matrix sweep.cfg

Exit status is 0 on success.  On failure a line ``[stage] message`` goes to
stderr and the exit status identifies the stage (see ``EXIT_CODES``).
"""
from __future__ import annotations

import argparse
import logging
import sys

from .config import ExperimentConfig, parse_matrix, parse_overrides
from .exceptions import ConfigError, StageError
from .experiment import run_full_experiment, run_stage, run_sweep

logger = logging.getLogger("dopinv")

EXIT_CODES = {"config": 2, "forward": 3, "synth": 4, "invert": 5, "reconstruct": 6,
              "report": 7, "sweep": 8}


def _load_config(args):
    if args.config:
        return ExperimentConfig.from_file(args.config, args.set)
    return ExperimentConfig.from_mapping(parse_overrides(args.set))


def build_parser():
    parser = argparse.ArgumentParser(prog="dopinv", description=(
        "Bayesian doping-profile reconstruction from current-density data "
        "(pCN MCMC over the equilibrium potential)."))
    parser.add_argument("-v", "--verbose", action="count", default=0,
                        help="more logging (-v info, -vv debug)")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="config file of 'section.key = value' lines")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config entry (repeatable)")

    common(sub.add_parser("full", help="run the whole pipeline and write report.json"))
    common(sub.add_parser("forward", help="true fields and noiseless data"))
    common(sub.add_parser("synth", help="noisy synthetic observations"))
    p = sub.add_parser("invert", help="sample the posterior")
    common(p)
    p.add_argument("--observations", help="observation CSV (default: <directory>/observations.csv)")
    p = sub.add_parser("reconstruct", help="doping from the posterior mean")
    common(p)
    p.add_argument("--posterior-mean", dest="posterior_mean",
                   help="posterior-mean field CSV (default: <directory>/posterior_mean.csv)")
    p = sub.add_parser("sweep", help="full runs over a config matrix")
    common(p)
    p.add_argument("--matrix", required=True,
                   help="file of 'section.key = v1 v2 ...' lines; runs the cartesian product")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(asctime)s %(name)s %(levelname)s: %(message)s")
    try:
        try:
            cfg = _load_config(args)
        except ConfigError as exc:
            raise StageError("config", str(exc)) from exc
        if args.command == "full":
            report = run_full_experiment(cfg)
            print(f"mse_doping={report.mse_doping:.6g} mse_potential={report.mse_potential:.6g} "
                  f"acceptance_rate={report.acceptance_rate:.4f} "
                  f"wall_time_seconds={report.wall_time_seconds:.1f}")
        elif args.command == "sweep":
            try:
                with open(args.matrix) as fh:
                    matrix = parse_matrix(fh.read(), args.matrix)
            except (OSError, ConfigError) as exc:
                raise StageError("config", str(exc)) from exc
            for overrides, report in run_sweep(cfg, matrix):
                tag = " ".join(f"{k}={v}" for k, v in overrides.items()) or "base"
                print(f"{tag}: mse_doping={report.mse_doping:.6g} "
                      f"acceptance_rate={report.acceptance_rate:.4f}")
        else:
            inputs = {}
            if args.command == "invert" and args.observations:
                inputs["observations"] = args.observations
            if args.command == "reconstruct" and args.posterior_mean:
                inputs["posterior_mean"] = args.posterior_mean
            result = run_stage(args.command, cfg, **inputs)
            for path in result["files"]:
                print(path)
    except StageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_CODES.get(exc.stage, 1)
    except ConfigError as exc:
        print(f"[config] {exc}", file=sys.stderr)
        return EXIT_CODES["config"]
    return 0


if __name__ == "__main__":
    sys.exit(main())
