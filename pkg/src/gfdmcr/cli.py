"""Command-line entry point: ``gfdmcr <scenario> --config FILE``."""

import argparse
import logging
import os
import sys

from . import __version__
from .errors import ConfigError, InvariantViolation
from .harness import SCENARIOS, ExperimentConfig, run

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NONCONVERGED = 3
EXIT_INVARIANT = 4

log = logging.getLogger("gfdmcr")


def build_parser():
    p = argparse.ArgumentParser(prog="gfdmcr", description=__doc__)
    p.add_argument("scenario", choices=SCENARIOS)
    p.add_argument("--config", help="flat 'key = value' configuration file")
    p.add_argument("--seed", type=int, default=None, help="master seed (overrides the file)")
    p.add_argument("--out", default=".", help="output directory")
    p.add_argument("--threads", type=int, default=1, help="worker threads")
    p.add_argument("--strict", action="store_true",
                   help="exit with status 3 when any solve did not converge")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    return p


def write_outputs(table, cfg: ExperimentConfig, out_dir):
    """Write one CSV per metric plus ``manifest.txt``; returns the file names."""
    os.makedirs(out_dir, exist_ok=True)
    prefix = cfg.scenario.replace("-", "_")
    names = []
    for metric, sub in table.split().items():
        name = f"{prefix}_{metric}.csv"
        sub.to_csv(os.path.join(out_dir, name))
        names.append(name)
    with open(os.path.join(out_dir, "manifest.txt"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"tool = gfdmcr {__version__}\n")
        for key in sorted(table.metadata):
            fh.write(f"{key} = {table.metadata[key]}\n")
        fh.write("files = " + ",".join(names) + "\n")
        fh.write("\n[config]\n")
        fh.write(cfg.canonical_text())
    return names


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    try:
        if args.threads < 1:
            raise ConfigError("--threads must be at least 1")
        if args.config:
            cfg = ExperimentConfig.from_file(args.config, scenario=args.scenario, seed=args.seed)
        else:
            cfg = ExperimentConfig(scenario=args.scenario, seed=args.seed or 0)
    except (ConfigError, OSError) as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG

    try:
        table = run(cfg, threads=args.threads)
    except InvariantViolation as exc:
        log.error("invariant violated: %s", exc)
        return EXIT_INVARIANT

    names = write_outputs(table, cfg, args.out)
    log.info("wrote %d files to %s", len(names) + 1, args.out)
    if args.strict and table.metadata.get("unconverged_solves", 0):
        log.error("%d solves did not converge", table.metadata["unconverged_solves"])
        return EXIT_NONCONVERGED
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
