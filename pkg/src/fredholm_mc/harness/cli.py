"""Command line entry point: ``fredholm-mc {solve,compare,coverage,calibrate,replay}``.

Exit codes: 0 success, 1 replay mismatch, 2 config error, 3 contraction
violated, 4 budget gate violated.
"""

from __future__ import annotations

import argparse
import logging
import sys

from fredholm_mc.dtm import BudgetError
from fredholm_mc.harness.config import ConfigError, load_config
from fredholm_mc.harness.runner import COMMANDS, replay
from fredholm_mc.problem import ContractionError

log = logging.getLogger("fredholm_mc")

EXIT_MISMATCH = 1
EXIT_CONFIG = 2
EXIT_CONTRACTION = 3
EXIT_BUDGET = 4


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fredholm-mc", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", required=True, metavar="PATH")
        s.add_argument("--seed", type=int, metavar="U64")
        s.add_argument("--out", default="out", metavar="DIR")
        s.add_argument("--method", choices=["dtm", "recursive", "reference"])
        s.add_argument("--level", type=float)
        s.add_argument("--sims", type=int)
        s.add_argument("--trials", type=int)
    r = sub.add_parser("replay", help="re-run a recorded command and compare outputs byte for byte")
    r.add_argument("--out", required=True, metavar="DIR")
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    args = _parser().parse_args(argv)
    try:
        if args.command == "replay":
            bad = replay(args.out)
            if bad:
                log.error("replay mismatch: %s", ", ".join(bad))
                return EXIT_MISMATCH
            log.info("replay ok: outputs are byte-identical")
            return 0
        config = load_config(args.config).with_overrides(
            seed=args.seed,
            method=args.method,
            level=args.level,
            sims=args.sims,
            trials=args.trials,
        )
        result = COMMANDS[args.command](config, args.out)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except ContractionError as exc:
        log.error("contraction violated: %s", exc)
        return EXIT_CONTRACTION
    except BudgetError as exc:
        log.error("budget gate violated: %s", exc)
        return EXIT_BUDGET
    _summarize(args.command, result, args.out)
    return 0


def _summarize(command, result, out) -> None:
    if command == "solve":
        log.info("depth %d, draws %d -> %s", result.depth, result.draws, out)
    elif command == "compare":
        ok = [r for r in result if r.get("status") == "ok"]
        for r in ok:
            log.info("N=%d  draw ratio %.3f  matched=%s", r["budget"], r["draw_ratio"], r["matched"])
    elif command == "coverage":
        log.info("coverage %.3f over %d trials", result.coverage, result.trials)
    elif command == "calibrate":
        log.info("c3 = %s", result[0])


if __name__ == "__main__":
    sys.exit(main())
