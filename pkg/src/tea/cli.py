"""``tea`` command line: train, adapt, eval, report.

Exit codes: 0 success, 2 configuration or input error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys

from . import config as config_mod
from . import runner
from .nn import NonFiniteError, ShapeError
from .persist import CheckpointError
from .shiftbench import IdxFormatError

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


def _parser():
    p = argparse.ArgumentParser(prog="tea", description="Energy-based test-time adaptation at desk scale.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, checkpoint):
        sp.add_argument("--config", required=True, help="JSON run config")
        sp.add_argument("--out", help="output directory (overrides output_dir)")
        sp.add_argument("--seed", type=int, help="overrides the config seed")
        if checkpoint:
            sp.add_argument("--checkpoint", required=True, help="source model checkpoint")

    common(sub.add_parser("train", help="train the source model"), False)
    sp = sub.add_parser("adapt", help="adapt on the shifted test set")
    common(sp, True)
    sp.add_argument("--dump-samples", action="store_true", help="write SGLD samples as a PGM grid")
    sp = sub.add_parser("eval", help="evaluate over the corruption grid")
    common(sp, True)
    sp.add_argument("--baseline", help="results.json of the mCE baseline (usually SOURCE)")
    sp = sub.add_parser("report", help="CSV comparison tables from results documents")
    sp.add_argument("docs", nargs="+", help="results.json files")
    sp.add_argument("--out", required=True, help="directory for the CSV tables")
    return p


def _load_cfg(args):
    cfg = config_mod.load(args.config, args.seed)
    if args.out:
        cfg["output_dir"] = args.out
    return cfg


def _load_docs(paths):
    docs = []
    for p in paths:
        try:
            with open(p) as f:
                docs.append(json.load(f))
        except (OSError, json.JSONDecodeError) as err:
            raise runner.RunError(f"cannot read results document {p}: {err}") from None
    return docs


def run(argv=None):
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "report":
        runner.cmd_report(_load_docs(args.docs), args.out)
    else:
        cfg = _load_cfg(args)
        if args.command == "train":
            runner.cmd_train(cfg)
        elif args.command == "adapt":
            runner.cmd_adapt(cfg, args.checkpoint, dump_samples=args.dump_samples)
        else:
            runner.cmd_eval(cfg, args.checkpoint, baseline=args.baseline)
    return EXIT_OK


def main(argv=None):
    try:
        return run(argv)
    except (config_mod.ConfigError, runner.RunError, CheckpointError, IdxFormatError,
            ShapeError, FileNotFoundError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (NonFiniteError, FloatingPointError) as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
