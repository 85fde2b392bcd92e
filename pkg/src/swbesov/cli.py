"""Command line entry point: ``swbesov run`` and ``swbesov sweep``."""
from __future__ import annotations

import argparse
import logging
import sys

from .errors import CFLError, ValidationError, VacuumError
from .harness import compare_resolutions, load_config, run_scenario

log = logging.getLogger("swbesov")

EXIT_PASS, EXIT_FAIL, EXIT_INVALID = 0, 1, 2


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="swbesov", description="Run Besov-space shallow-water scenarios.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one scenario and write its artifacts")
    run.add_argument("config")
    run.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                     help="override a config key by dotted path, e.g. physics.kappa=0.1")
    run.add_argument("--deterministic", action="store_true", help="single-threaded FFTs for byte-identical CSVs")
    run.add_argument("--out", default=None, help="output directory (overrides output_dir)")

    sweep = sub.add_parser("sweep", help="run one scenario at several grid resolutions")
    sweep.add_argument("config")
    sweep.add_argument("--resolutions", required=True, help="comma separated points per dimension")
    sweep.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    sweep.add_argument("--out", default=None)
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = load_config(args.config).with_overrides(args.overrides)
        if args.command == "run":
            art = run_scenario(cfg, deterministic=args.deterministic, output_dir=args.out)
            print(f"{cfg.scenario}: {'PASS' if art.passed else 'FAIL'}")
            for k, v in art.report["metrics"].items():
                print(f"  {k} = {v}")
            print(f"artifacts written to {art.output_dir}")
            return EXIT_PASS if art.passed else EXIT_FAIL
        try:
            resolutions = [int(x) for x in args.resolutions.split(",") if x.strip()]
        except ValueError:
            raise ValidationError(f"bad --resolutions {args.resolutions!r}", "comma separated integers")
        table = compare_resolutions(cfg, resolutions, output_dir=args.out or cfg.output_dir)
        for key in sorted(table.metrics):
            vals = ", ".join(f"{v:.6g}" for v in table.metrics[key])
            print(f"{key}: {vals}")
        return EXIT_PASS if all(table.passed) else EXIT_FAIL
    except ValidationError as exc:
        name = f" [{exc.inequality}]" if exc.inequality else ""
        print(f"validation error{name}: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (CFLError, VacuumError) as exc:
        print(f"solver error in {args.config}: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
