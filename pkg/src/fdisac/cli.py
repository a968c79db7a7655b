"""Command line entry point: ``run``, ``validate`` and ``peb``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace

from . import harness
from .channel import build_channels
from .codebook import make_codebook
from .fim import fim_fast, peb
from .isac import MODES, algorithm1
from .scenario import ConfigError, dbm_to_watts
from .signals import BfConfiguration

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INFEASIBLE = 3

log = logging.getLogger("fdisac")


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fdisac", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="Monte Carlo sweep over the transmit power")
    run.add_argument("--config", required=True)
    run.add_argument("--trials", type=int)
    run.add_argument("--pmax-dbm", help="comma separated power grid in dBm")
    run.add_argument("--seed", type=int)
    run.add_argument("--out", default="results")
    run.add_argument("--mode", action="append", choices=MODES,
                     help="may be repeated; defaults to the config or isac")
    run.add_argument("--timing", action="store_true", help="write wall_ms values")

    val = sub.add_parser("validate", help="check a configuration file")
    val.add_argument("--config", required=True)

    pb = sub.add_parser("peb", help="position error bound of one scenario")
    pb.add_argument("--config", required=True)
    pb.add_argument("--scenario", required=True)
    pb.add_argument("--mode", choices=MODES, default=MODES[0])
    return p


def _run(args) -> int:
    config, settings = harness.load_config(args.config)
    if args.trials is not None:
        settings = replace(settings, n_trials=args.trials)
    if args.pmax_dbm:
        settings = replace(settings, p_max_dbm=harness.parse_float_list(args.pmax_dbm))
    if args.seed is not None:
        settings = replace(settings, seed=args.seed)
    if args.mode:
        settings = replace(settings, modes=tuple(dict.fromkeys(args.mode)))
    timing = args.timing or settings.record_timing

    def progress(rec):
        log.info("p=%.1f dBm trial %d %s rmse=%.3g peb=%.3g", rec.p_max_dbm, rec.trial,
                 rec.mode, rec.rmse, rec.peb)

    summary, records = harness.run_monte_carlo(
        config, [dbm_to_watts(p) for p in settings.p_max_dbm], settings.n_trials,
        settings.modes, settings.k, settings.u, settings.seed, progress=progress)
    for path in harness.emit_outputs(summary, records, args.out, timing=timing):
        print(path)
    if timing:
        log.info("total wall time %.1f s", summary.wall_time)
    if records and not any(r.feasible for r in records):
        print("no feasible trial", file=sys.stderr)
        return EXIT_INFEASIBLE
    return EXIT_OK


def _validate(args) -> int:
    config, settings = harness.load_config(args.config)
    print(json.dumps({"config": harness.config_echo(config),
                      "run": harness._json_value(vars(settings))}, indent=2, sort_keys=True))
    return EXIT_OK


def _peb(args) -> int:
    config, _ = harness.load_config(args.config)
    scenario = harness.load_scenario(args.scenario)
    if scenario.u > config.n_rf:
        raise ConfigError(f"{scenario.u} users exceed {config.n_rf} RF chains")
    channels = build_channels(scenario, config)
    cb = make_codebook(config.codebook_bits)
    sol = algorithm1(scenario, channels, config, zeta_hat=scenario.zeta(), mode=args.mode,
                     codebook=cb)
    res = peb(fim_fast(BfConfiguration(sol.bf.w_tx, sol.bf.w_rx, sol.bf.v),
                       scenario.zeta(), channels, config))
    out = {"mode": args.mode, "peb_m": res.peb_full, "peb_diag_m": res.peb_diag,
           "trace_bound_m2": res.trace_bound, "singular": res.singular,
           "sum_rate_bpshz": sol.sum_rate, "feasible": sol.feasible,
           "xi": sol.bf.xi, "rho": sol.bf.rho}
    print(json.dumps(harness._json_value(out), indent=2, sort_keys=True))
    return EXIT_OK if sol.feasible else EXIT_INFEASIBLE


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    handler = {"run": _run, "validate": _validate, "peb": _peb}[args.command]
    try:
        return handler(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
