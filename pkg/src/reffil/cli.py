"""Command line: ``reffil run|eval|compare|dump-config-defaults``.

Exit codes: 0 success, 1 run failure, 2 config error, 3 missing input.
``REFFIL_OUT_ROOT`` sets where ``run`` writes when ``--out`` is omitted.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .config import ConfigError, default_config, dumps, load_config
from .runner import emit_report, evaluate_run, method_label, run_experiment


def _run(args) -> int:
    cfg = load_config(args.config)
    seed = cfg.seed if args.seed is None else args.seed
    out = args.out
    if out is None:
        cfg.seed = seed
        out = Path(os.environ.get("REFFIL_OUT_ROOT", "runs")) / f"{method_label(cfg)}-seed{seed}"
    path = run_experiment(cfg, out, seed=seed)
    with open(path / "summary.json") as fh:
        summary = json.load(fh)
    print(f"{path}: avg={summary['avg']:.4f} last={summary['last']:.4f} fgt={summary['fgt']:.4f} bwt={summary['bwt']:.4f}")
    return 0


def _eval(args) -> int:
    summary = evaluate_run(args.run)
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


def _compare(args) -> int:
    report = emit_report(args.runs, args.out)
    sys.stdout.write(report["text"])
    return 0


def _dump_defaults(args) -> int:
    sys.stdout.write(dumps(default_config()))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="reffil", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="per-round log lines")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one experiment")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=_run)

    p = sub.add_parser("eval", help="recompute metrics of a run directory")
    p.add_argument("--run", required=True)
    p.set_defaults(func=_eval)

    p = sub.add_parser("compare", help="table of several runs")
    p.add_argument("--runs", nargs="+", required=True)
    p.add_argument("--out", help="also write report.csv / report.txt here")
    p.set_defaults(func=_compare)

    p = sub.add_parser("dump-config-defaults", help="print the default config")
    p.set_defaults(func=_dump_defaults)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config-error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"io-error: {exc}", file=sys.stderr)
        return 3
    except Exception as exc:
        print(f"run-error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
