"""``roughns <experiment> --config FILE [--seed U64] [--out DIR] [--corrupt-zz EPS]``.

Exit status: 0 when every assertion of the experiment holds, 1 when one fails,
2 on configuration or I/O errors.
"""
from __future__ import annotations

import argparse
import dataclasses
import sys

from .config import load_config, validate
from .errors import ConfigError, RoughNSError
from .experiments import EXPERIMENTS


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="roughns", description="Rough transport-noise Navier-Stokes experiments.")
    ap.add_argument("experiment", choices=sorted(EXPERIMENTS))
    ap.add_argument("--config", required=True, help="key = value file with [section] headers")
    ap.add_argument("--seed", type=int, default=None, help="64-bit seed overriding the config")
    ap.add_argument("--out", default="out", help="output directory")
    ap.add_argument("--corrupt-zz", type=float, default=None, metavar="EPS",
                    help="chen-audit only: add EPS to one second-level entry")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = dataclasses.replace(cfg, seed=args.seed)
            validate(cfg)
        if args.corrupt_zz is not None and args.experiment != "chen-audit":
            raise ConfigError("--corrupt-zz", "only valid for chen-audit")
        kwargs = {"corrupt_zz": args.corrupt_zz} if args.experiment == "chen-audit" else {}
        res = EXPERIMENTS[args.experiment](cfg, args.out, **kwargs)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 2
    except RoughNSError as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    for k, v in res.metrics.items():
        print(f"{k} = {v}")
    print(f"{res.name}: {'PASS' if res.passed else 'FAIL'}")
    return 0 if res.passed else 1


if __name__ == "__main__":
    sys.exit(main())
