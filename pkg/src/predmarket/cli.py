"""Command-line entry point: ``predmarket simulate|sweep|replay|report``.

Every configuration key is also a flag (``--engine.eta 0.05``); flag values
are parsed as YAML scalars or lists and override the config file. Exit
codes: 0 success, 1 validation or configuration error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

import yaml

from .config import config_from_dict, flat_keys, load_data, manifest
from .errors import ConfigError, ConflictError, ReplayError, ValidationError
from .market import atomic_write_text, read_ledger
from .report import emit_report, run_replay, write_replay
from .scenarios import (
    missingness_sweep,
    reward_trace_csv,
    run_monte_carlo,
    simulate_rewards,
    stats_csv,
    trajectories_csv,
)
from .tables import load_forecast_csv

log = logging.getLogger("predmarket")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2

SUBCOMMAND_MODES = {"sweep": "sweep", "replay": "replay"}


class _Parser(argparse.ArgumentParser):
    """Usage errors count as validation errors (exit 1), not argparse's 2."""

    def error(self, message):
        raise ConfigError("<command line>", message)


def _add_key_flags(parser):
    for key in flat_keys():
        if key == "mode":
            continue
        parser.add_argument(f"--{key}", dest=f"key:{key}", metavar="VALUE", default=None,
                            help=argparse.SUPPRESS)


def build_parser():
    parser = _Parser(prog="predmarket", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="Monte Carlo weight estimation on a synthetic scenario")
    p.add_argument("--config", help="YAML or JSON configuration file")
    p.add_argument("--varying", action="store_true", help="time-varying true weights")
    _add_key_flags(p)

    p = sub.add_parser("sweep", help="statistics across missingness rates")
    p.add_argument("--config")
    _add_key_flags(p)

    p = sub.add_parser("replay", help="run the market over forecast/realisation CSV files")
    p.add_argument("--config")
    _add_key_flags(p)

    p = sub.add_parser("report", help="re-emit report CSV files from a ledger")
    p.add_argument("ledger", help="ledger JSON-lines file")
    p.add_argument("--output-dir", default=None, help="defaults to the ledger's directory")
    return parser


def _overrides(args):
    out = {}
    for name, value in vars(args).items():
        if name.startswith("key:") and value is not None:
            try:
                out[name[4:]] = yaml.safe_load(value)
            except yaml.YAMLError:
                raise ConfigError(name[4:], f"cannot parse flag value {value!r}") from None
    return out


def _load_config(args):
    data = {}
    if args.config:
        with open(args.config) as fh:
            data = load_data(fh.read())
    overrides = _overrides(args)
    if args.command == "simulate":
        varying = args.varying or (isinstance(data, dict) and data.get("mode") == "simulate-varying")
        overrides["mode"] = "simulate-varying" if varying else "simulate-invariant"
    else:
        overrides["mode"] = SUBCOMMAND_MODES[args.command]
    return config_from_dict(data, overrides)


def _write(config, name, text):
    path = os.path.join(config.output_dir, name)
    atomic_write_text(path, text)
    log.info("wrote %s", path)
    return path


def cmd_simulate(config):
    eng = config.engine
    results = []
    for method in eng.methods:
        log.info("simulating %s over %d runs", method, config.scenario.runs)
        res = run_monte_carlo(config.scenario, method, eng.tau, eng.eta)
        results.append(res)
        _write(config, f"trajectories_{method}.csv", trajectories_csv(res, eng.stride))
    _write(config, "stats.csv", stats_csv(results))
    if eng.rewards:
        for method in eng.methods:
            trace = simulate_rewards(config.scenario, 0, eta=eng.eta,
                                     allocation=config.allocation,
                                     utility=config.utility, method=method)
            _write(config, f"rewards_{method}.csv", reward_trace_csv(trace))


def cmd_sweep(config):
    eng = config.engine
    results = []
    for method in eng.methods:
        log.info("sweeping %s over rates %s", method, list(config.rates))
        results += missingness_sweep(config.scenario, config.rates, method, eng.tau, eng.eta)
    _write(config, "stats.csv", stats_csv(results))


def cmd_replay(config):
    table = load_forecast_csv(config.forecasts, config.realizations)
    result = run_replay(table, config.utility, config.engine.eta, config.allocation,
                        config.task_id, config.market_seed)
    write_replay(result, config.output_dir)
    log.info("replayed %d rounds into %s", result.losses.rounds, config.output_dir)


def cmd_report(args):
    ledger = read_ledger(args.ledger)
    out = args.output_dir or os.path.dirname(os.path.abspath(args.ledger))
    for path in emit_report(ledger, out):
        log.info("wrote %s", path)


def run(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    if args.command == "report":
        cmd_report(args)
        return EXIT_OK
    config = _load_config(args)
    os.makedirs(config.output_dir, exist_ok=True)
    _write(config, "manifest.json", manifest(config))
    {"simulate": cmd_simulate, "sweep": cmd_sweep, "replay": cmd_replay}[args.command](config)
    return EXIT_OK


def main(argv=None):
    try:
        return run(argv)
    except (ValidationError, ConflictError, ReplayError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime error
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
