"""Command line entry point: ``simulate``, ``calibrate`` and ``analyze``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .dml import LearnerConfig
from .errors import ConfigError, DmlRcError

log = logging.getLogger("dmlrc")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4
EXIT_PARTIAL = 5


def u64(text):
    try:
        value = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if not 0 <= value < 1 << 64:
        raise argparse.ArgumentTypeError("seed must fit in 64 unsigned bits")
    return value


def _learner_args(p):
    p.add_argument("--folds", type=int, default=2, help="cross-fitting folds K (default 2)")
    p.add_argument("--penalty-rule", choices=("min", "1se"), default="min",
                   help="LASSO penalty selection rule (default min)")


def build_parser():
    parser = argparse.ArgumentParser(prog="dmlrc", description=__doc__)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="Monte-Carlo study for one scenario")
    sim.add_argument("--scenario", type=int, choices=range(1, 9), metavar="{1-8}")
    sim.add_argument("--rho", type=float)
    sim.add_argument("--replicates", type=int)
    sim.add_argument("--seed", type=u64, default=0)
    sim.add_argument("--config", type=Path, help="YAML/JSON scenario overrides")
    sim.add_argument("--out", type=Path, required=True, help="metrics CSV")
    sim.add_argument("--workers", type=int, default=1)
    sim.add_argument("--methods", default=None,
                     help="comma list, e.g. dml-corrected,slr-corrected (default all six)")
    _learner_args(sim)

    cal = sub.add_parser("calibrate", help="fit the calibration model on a validation CSV")
    cal.add_argument("--validation", type=Path, required=True)
    cal.add_argument("--schema", type=Path, required=True)
    cal.add_argument("--out", type=Path, required=True)

    ana = sub.add_parser("analyze", help="multi-pollutant analysis")
    ana.add_argument("--main", type=Path, required=True)
    ana.add_argument("--validation", type=Path, required=True)
    ana.add_argument("--schema", type=Path, required=True)
    ana.add_argument("--methods", required=True,
                     help="comma list of <slr|dml>-<uncorrected|corrected>")
    ana.add_argument("--interactions", action="store_true",
                     help="also run DML with all two-way interactions")
    ana.add_argument("--single-pollutant", action="store_true",
                     help="also run single-pollutant models")
    ana.add_argument("--seed", type=u64, required=True)
    ana.add_argument("--out", type=Path, required=True)
    ana.add_argument("--diagnostics", action="store_true",
                     help="include per-fold nuisance fits in the report")
    _learner_args(ana)
    return parser


def _split(text):
    return [m.strip() for m in text.split(",") if m.strip()]


def cmd_simulate(args):
    from . import simulation

    overrides = {"scenario": args.scenario, "rho": args.rho, "seed": None}
    if args.config is not None:
        cfg, R = simulation.load_scenario_config(args.config, **overrides)
    else:
        if args.scenario is None or args.rho is None:
            raise ConfigError("simulate needs --scenario and --rho (or --config)")
        cfg, R = simulation.ScenarioConfig(scenario=args.scenario, rho=args.rho), None
    R = args.replicates if args.replicates is not None else R
    if R is None:
        raise ConfigError("simulate needs --replicates (or R in the config)")
    methods = simulation.METHODS if args.methods is None else tuple(_split(args.methods))
    learner = LearnerConfig(rule=args.penalty_rule)
    summary = simulation.run_replicates(cfg, R, methods, base_seed=args.seed,
                                        workers=args.workers, K=args.folds, learner=learner)
    summary.to_csv(args.out)
    meta = dict(summary.meta)
    meta["version"] = __version__
    meta["exposure_corr_source"] = "config" if args.config and _has(args.config, "sigma") \
        else "surrogate correlation table, constituent block, nearest correlation"
    meta["error_corr_source"] = "config" if args.config and _has(args.config, "err_corr") \
        else "error correlation table, constituent block, nearest correlation"
    Path(str(args.out) + ".meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    log.info("wrote %s", args.out)
    return EXIT_OK


def _has(path, key):
    import yaml

    raw = yaml.safe_load(Path(path).read_text()) or {}
    return raw.get(key) is not None


def cmd_calibrate(args):
    from .pipeline import calibrate_file, load_schema

    model = calibrate_file(args.validation, load_schema(args.schema))
    args.out.write_text(model.to_json(indent=2))
    return EXIT_OK


def cmd_analyze(args):
    from .pipeline import ingest_csv, load_schema, multi_pollutant_analyze

    schema = load_schema(args.schema)
    ms = ingest_csv(args.main, schema, "main")
    evs = ingest_csv(args.validation, schema, "validation")
    learner = LearnerConfig(rule=args.penalty_rule)
    report = multi_pollutant_analyze(ms, evs, schema, _split(args.methods), args.seed,
                                     args.interactions, args.single_pollutant, K=args.folds,
                                     learner=learner, diagnostics=args.diagnostics)
    args.out.write_text(report.to_json(indent=2))
    for name, label in report.failures:
        log.warning("%s: %s failed", name, label)
    return report.exit_code


COMMANDS = {"simulate": cmd_simulate, "calibrate": cmd_calibrate, "analyze": cmd_analyze}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except DmlRcError as exc:
        kind = {EXIT_CONFIG: "config", EXIT_DATA: "data"}.get(exc.exit_code, "numerical")
        print(f"{kind} error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
