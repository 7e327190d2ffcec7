"""Command-line entry point.

Subcommands mirror the pipeline stages: synth, train, quantize,
calibrate, transmit, evaluate, report. Exit codes: 0 success, 2 usage,
3 missing input artifact, 4 config parse failure, 1 other failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .config import ConfigError, RunConfig
from .pipeline import (
    ArtifactError,
    stage_calibrate,
    stage_evaluate,
    stage_quantize,
    stage_report,
    stage_synth,
    stage_train,
    stage_transmit,
)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_MISSING = 3
EXIT_CONFIG = 4

STAGES = {
    "synth": stage_synth,
    "train": stage_train,
    "quantize": stage_quantize,
    "calibrate": stage_calibrate,
    "evaluate": stage_evaluate,
    "report": stage_report,
}


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qsemlink", description=__doc__.splitlines()[0])
    p.add_argument("--config", type=str, default=None, help="run config file (key = value sections)")
    p.add_argument("--seed", type=int, default=None, help="override the run seed")
    p.add_argument("--out", type=str, default="runs/default", help="output directory")
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("synth", "train", "quantize", "calibrate", "evaluate", "report"):
        sub.add_parser(name)
    tp = sub.add_parser("transmit")
    tp.add_argument("--psnr", type=str, default="default", help="channel PSNR in dB, or 'clean'")
    tp.add_argument("--fp", action="store_true", help="transmit with the full-precision model")
    pp = sub.add_parser("preset")
    pp.add_argument("name", choices=["desk", "paper"])
    pp.add_argument("path", type=str)
    return p


def _load_config(args) -> RunConfig:
    if args.config is None:
        cfg = RunConfig.desk()
    else:
        path = Path(args.config)
        if not path.exists():
            raise ArtifactError("config file", path)
        cfg = RunConfig.load(path)
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "preset":
            cfg = RunConfig.desk() if args.name == "desk" else RunConfig.paper()
            cfg.save(args.path)
            print(f"wrote {args.name} preset to {args.path}")
            return EXIT_OK
        cfg = _load_config(args)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        if args.command == "transmit":
            psnr: float | None | str
            if args.psnr == "clean":
                psnr = None
            elif args.psnr == "default":
                psnr = "default"
            else:
                psnr = float(args.psnr)
            result = stage_transmit(cfg, out, use_fp=args.fp, psnr=psnr)
        else:
            result = STAGES[args.command](cfg, out)
        print(f"{args.command}: ok -> {result}")
        return EXIT_OK
    except ArtifactError as e:
        print(f"error: missing-artifact: {e}", file=sys.stderr)
        return EXIT_MISSING
    except FileNotFoundError as e:
        print(f"error: missing-file: {e}", file=sys.stderr)
        return EXIT_MISSING
    except ConfigError as e:
        print(f"error: config: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as e:  # structured failure line, nonzero exit
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
