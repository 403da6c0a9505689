"""Command-line front end.

Exit codes: 0 success, 2 configuration error, 3 constraint violation,
4 malformed data.
"""

from __future__ import annotations

import argparse
import sys

from .errors import ConfigError, FlatSpectrum, IngestError
from .harness import (ConstraintError, PRESETS, cli_estimate, cli_fisher, cli_scan, cli_simulate,
                      cli_spectrum, load_config)
from .io import ingest_external, read_dataset, write_dataset

EXIT_OK, EXIT_CONFIG, EXIT_CONSTRAINT, EXIT_DATA = 0, 2, 3, 4


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--preset", choices=sorted(PRESETS), help="built-in parameter set")
    common.add_argument("--seed", type=int, help="override run.seed")
    common.add_argument("--threads", type=int, default=1, help="worker processes for fits")
    common.add_argument("--out", required=True, help="output path")

    p = argparse.ArgumentParser(prog="qres", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="simulate a dataset (QRES + JSON sidecar)")
    e = sub.add_parser("estimate", parents=[common], help="resampled MLE on a dataset")
    e.add_argument("dataset")
    sub.add_parser("fisher", parents=[common], help="Cramer-Rao bounds at the configured truth")
    s = sub.add_parser("spectrum", parents=[common], help="averaged power spectrum as CSV")
    s.add_argument("dataset")
    s.add_argument("--pad", type=int, default=1, help="zero-padding factor")
    sub.add_parser("scan", parents=[common], help="separation scan (resumable CSV)")
    i = sub.add_parser("ingest", parents=[common], help="convert lab records to QRES")
    i.add_argument("records")
    i.add_argument("--format", choices=("csv", "binary"), default="csv")
    i.add_argument("--fidelity", type=float, default=1.0, help="readout fidelity of the records")
    return p


def run(args) -> int:
    if args.command == "ingest":
        write_dataset(ingest_external(args.records, args.format, args.fidelity), args.out)
        return EXIT_OK
    if args.command == "spectrum":
        cli_spectrum(read_dataset(args.dataset), args.out, args.pad)
        return EXIT_OK
    cfg = load_config(args.config, args.preset, args.seed)
    if args.command == "simulate":
        cli_simulate(cfg, args.out)
    elif args.command == "estimate":
        cli_estimate(read_dataset(args.dataset), cfg, args.out, n_jobs=args.threads)
    elif args.command == "fisher":
        cli_fisher(cfg, args.out)
    elif args.command == "scan":
        cli_scan(cfg, args.out, progress=lambda row: print(
            f"point {row['point']}: separation {row['separation_2pi_hz']} 2pi Hz done",
            file=sys.stderr))
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return run(args)
    except ConstraintError as e:
        print(f"constraint violation ({e.field}): {e}", file=sys.stderr)
        return EXIT_CONSTRAINT
    except ConfigError as e:
        where = f" ({e.field})" if e.field else ""
        print(f"config error{where}: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (IngestError, FlatSpectrum) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
