"""Command line entry point: ``ncdsfl {nc-validate,train,sweep,gen-data}``.

Exit codes: 0 success, 1 run failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import config as cfgmod
from .errors import ConfigError, NcdsflError

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_CONFIG = 2


def resolve_config(args):
    base = cfgmod.profile(args.profile)
    cfg = cfgmod.load(args.config, base) if args.config else base
    if args.seed is not None:
        cfg.seed = args.seed
    if args.jobs is not None:
        cfg.jobs = args.jobs
    if args.out is not None:
        cfg.out_dir = args.out
    return cfg.validate()


def _prepare_out(cfg):
    os.makedirs(cfg.out_dir, exist_ok=True)
    cfg.save(os.path.join(cfg.out_dir, "config.yaml"))
    return cfg.out_dir


def _log(out_dir):
    fh = open(os.path.join(out_dir, "run.log"), "a")

    def write(line):
        fh.write(line + "\n")
        fh.flush()
        print(line)

    return write, fh


def cmd_nc_validate(cfg):
    from .checks import run_nc_suite

    out = _prepare_out(cfg)
    report = run_nc_suite(cfg.nc_validate)
    with open(os.path.join(out, "nc_validate.json"), "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
    for name, part in report.items():
        if isinstance(part, dict):
            print(f"{name}: {'pass' if part['passed'] else 'FAIL'}")
    return EXIT_OK if report["passed"] else EXIT_FAIL


def cmd_train(cfg):
    from .sweep import train_run

    out = _prepare_out(cfg)
    log, fh = _log(out)
    try:
        log(f"train algorithm={cfg.fed.algorithm} seed={cfg.seed} rounds={cfg.fed.rounds} clients={cfg.fed.n_clients}")
        history, _ = train_run(cfg, out)
        for ev in history.events:
            log(f"{ev[0]} round={ev[1]} clients={ev[2]}")
        s = history.summary(cfg.threshold, cfg.window)
        log(f"final_ber={s['final_ber']:.5f} rounds_to_threshold={s['rounds_to_threshold']}")
    finally:
        fh.close()
    return EXIT_OK


def cmd_sweep(cfg):
    from .sweep import run_sweep

    out = _prepare_out(cfg)
    log, fh = _log(out)
    try:
        res = run_sweep(cfg, out, log=log)
    finally:
        fh.close()
    if res.failures:
        print(f"{len(res.failures)} of {len(res.failures) + len(res.runs)} runs failed", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


def cmd_gen_data(cfg):
    from .sweep import build_federation, default_setups

    out = _prepare_out(cfg)
    datasets, validation = build_federation(cfg, default_setups(cfg), cfg.seed)
    for ds in datasets:
        ds.export_csv(os.path.join(out, f"client{ds.client_id}_channels.csv"))
        meta = ds.describe()
        meta["pdp"] = {
            "path_powers": ds.pdp.path_powers.tolist(),
            "path_delays": ds.pdp.path_delays.tolist(),
            "shadow_db": ds.pdp.shadow_db,
            "rms_delay_s": ds.pdp.rms_delay_s,
        }
        with open(os.path.join(out, f"client{ds.client_id}.json"), "w") as fh:
            json.dump(meta, fh, indent=2, default=float)
    np.savez_compressed(
        os.path.join(out, "validation.npz"),
        x=validation.x,
        data_bits=validation.data_bits,
        taps=validation.taps,
        snr_db=validation.snr_db,
        client_ids=validation.client_ids,
    )
    print(f"wrote {len(datasets)} client datasets and {validation.x.shape[0]} validation frames to {out}")
    return EXIT_OK


COMMANDS = {
    "nc-validate": cmd_nc_validate,
    "train": cmd_train,
    "sweep": cmd_sweep,
    "gen-data": cmd_gen_data,
}


def build_parser():
    p = argparse.ArgumentParser(prog="ncdsfl", description="Neural-collapse deep-supervised federated detection.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="YAML config; unset keys come from the profile")
        s.add_argument("--seed", type=int)
        s.add_argument("--out", help="output directory")
        s.add_argument("--profile", choices=cfgmod.PROFILES, default="paper-small")
        s.add_argument("--jobs", type=int, help="worker threads for client updates")
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        cfg = resolve_config(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NcdsflError, OSError, ArithmeticError, ValueError) as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
