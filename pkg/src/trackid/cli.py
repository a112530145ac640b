"""Command-line entry point: one pipeline stage per invocation."""
from __future__ import annotations

import argparse
import logging
import sys

from .config import KEYS, PRESETS, RunConfig, key_doc, read_config_file
from .errors import ConfigError, TrackidError
from .fusion import RULES
from threadpoolctl import threadpool_limits

COMMANDS = ("generate", "pretrain", "finetune", "train", "train-fusion",
            "eval", "predict", "trace", "config-dump")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_PREREQ, EXIT_NUMERIC = 0, 2, 3, 4, 5


def _flag(key: str) -> str:
    return "--" + key.replace("_", "-")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="flat key = value config file")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    choices = {"preset": PRESETS, "fusion_rule": RULES, "classifier": ("cnn", "rule")}
    for key in KEYS:
        common.add_argument(_flag(key), dest=key, default=None, choices=choices.get(key),
                            metavar=None if key in choices else key.upper(), help=key_doc(key) or None)

    parser = argparse.ArgumentParser(prog="trackid", description="Tracklet jersey-number identification pipeline.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    helps = {
        "generate": "render the synthetic datasets",
        "pretrain": "train the digit classifier",
        "finetune": "fine-tune the frame classifier",
        "train": "train the ResNet+LSTM sequence model (frozen base)",
        "train-fusion": "train the 1-D CNN on mean-fused score vectors",
        "eval": "write comparison, confusion, stress and ramp reports",
        "predict": "print the raw label and fused confidence for one tracklet",
        "trace": "export per-frame prediction traces for one tracklet",
        "config-dump": "print the resolved configuration",
    }
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common], help=helps[name], description=helps[name])
        if name in ("predict", "trace"):
            p.add_argument("--tracklet", type=int, default=None, metavar="ID", help="tracklet id")
            p.add_argument("--blob", default=None, metavar="PATH", help="dataset stem or manifest to read from")
    return parser


def resolve_config(args) -> RunConfig:
    file_values = read_config_file(args.config) if args.config else {}
    return RunConfig.resolve(file_values, {k: getattr(args, k) for k in KEYS})


def _dispatch(args, cfg: RunConfig, out) -> None:
    from . import pipeline as pl

    cmd = args.command
    if cmd == "config-dump":
        out.write(cfg.dump())
    elif cmd == "generate":
        stores = pl.run_generate(cfg)
        out.write(" ".join(f"{k}={len(v)}" for k, v in stores.items()) + "\n")
    elif cmd in ("pretrain", "finetune", "train", "train-fusion"):
        fn = {"pretrain": pl.run_pretrain, "finetune": pl.run_finetune,
              "train": pl.run_train, "train-fusion": pl.run_train_fusion}[cmd]
        _, metrics = fn(cfg)
        last = metrics.rows[-1]
        out.write(f"{cmd}: {len(metrics.rows)} steps, final loss {last[3]:.4f}\n")
    elif cmd == "eval":
        from .evaluate import format_comparison
        res = pl.run_eval(cfg)
        out.write(format_comparison(res["comparison"]) + "\n")
    elif cmd == "predict":
        if args.tracklet is None and args.blob is None:
            raise ConfigError("predict needs --tracklet or --blob")
        label, conf = pl.run_predict(cfg, args.tracklet, args.blob)
        out.write(f"{label} {conf:.6f}\n")
    elif cmd == "trace":
        traces = pl.run_trace(cfg, args.tracklet, args.blob)
        out.write(f"trace written for {len(traces['sequence'])} frames\n")


def main(argv=None, out=None) -> int:
    out = out or sys.stdout
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        with threadpool_limits(limits=cfg.threads):
            _dispatch(args, cfg, out)
    except TrackidError as exc:
        print(f"error ({type(exc).__name__}): {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, EOFError) as exc:
        print(f"error (io): {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error (shape/value): {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ArithmeticError, FloatingPointError) as exc:
        print(f"error (numeric): {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
