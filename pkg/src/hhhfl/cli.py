"""Command line entry point: ``hhhfl {ingest,run,summarize,gradcheck,selftest}``."""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from .errors import ConfigError, DataError, ParseError, ProtocolError, SerializationError

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_PROTOCOL = 4


def _cmd_ingest(args) -> int:
    from .ingest import ingest_files, save_dataset

    data, report = ingest_files(args.files)
    if not data:
        raise DataError(f"no usable events in {len(args.files)} file(s): {report}")
    out = Path(args.out)
    save_dataset(out, data)
    report["examples"] = {d.value: len(v) for d, v in data.items()}
    print(json.dumps(report, indent=2, sort_keys=True))
    return EXIT_OK


def _cmd_run(args) -> int:
    from .harness import load_config, run_experiment

    cfg = load_config(args.config, seed=args.seed)
    if args.log_messages:
        cfg = dataclasses.replace(cfg, log_messages=True)
    if args.timing:
        cfg = dataclasses.replace(cfg, record_timing=True)
    result = run_experiment(cfg, out_dir=args.out)
    print(json.dumps(result.summary["final_accuracy"], sort_keys=True))
    print(f"wrote {result.out_dir / 'metrics.csv'} and {result.out_dir / 'summary.json'}")
    return EXIT_OK


def _cmd_summarize(args) -> int:
    from .harness import summarize

    text, table = summarize(args.csv)
    print(text, end="")
    if args.out:
        Path(args.out).write_text(json.dumps(table, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return EXIT_OK


def _report(checks) -> int:
    for c in checks:
        print(f"[{'PASS' if c.passed else 'FAIL'}] {c.name}: {c.detail}")
    return EXIT_OK if all(c.passed for c in checks) else EXIT_FAIL


def _cmd_gradcheck(args) -> int:
    from .selfcheck import gradient_checks

    return _report(gradient_checks(seeds=args.seeds))


def _cmd_selftest(args) -> int:
    from .selfcheck import run_all

    return _report(run_all())


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hhhfl", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="parse raw MindBigData files into a dataset cache")
    p.add_argument("files", nargs="+")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_ingest)

    p = sub.add_parser("run", help="run one experiment from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    p.add_argument("--out", default=None, help="output directory (overrides config)")
    p.add_argument("--log-messages", action="store_true", help="write messages.jsonl")
    p.add_argument("--timing", action="store_true", help="fill duration_ms (breaks byte reproducibility)")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("summarize", help="compare metrics CSVs")
    p.add_argument("csv", nargs="+")
    p.add_argument("--out", default=None, help="write the machine-readable table as JSON")
    p.set_defaults(func=_cmd_summarize)

    p = sub.add_parser("gradcheck", help="finite-difference self-test of the numerics")
    p.add_argument("--seeds", type=int, default=5)
    p.set_defaults(func=_cmd_gradcheck)

    p = sub.add_parser("selftest", help="run the built-in property checks")
    p.set_defaults(func=_cmd_selftest)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, SerializationError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, ParseError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ProtocolError as exc:
        print(f"protocol error: {exc}", file=sys.stderr)
        return EXIT_PROTOCOL


if __name__ == "__main__":
    sys.exit(main())
