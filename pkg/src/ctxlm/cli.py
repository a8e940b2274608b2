"""Command-line entry point: ``ctxlm <command> [options]``.

Settings come from an optional JSON config file; command-line flags override it.
Failures print one ``error[<tag>]: <message>`` line to stderr and exit with status 1.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import CtxlmError, __version__
from .pipeline import (PipelineConfig, Workspace, evaluate, format_report, run_benchmark,
                       train_adapter, train_lms, write_report)
from .synth import write_dataset


def _features(text: str) -> tuple[str, ...]:
    return tuple(b.strip() for b in text.split(",") if b.strip())


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON pipeline config")
    common.add_argument("--seed", type=int)
    common.add_argument("--system", choices=["goal", "chatbot"])
    common.add_argument("--data-dir")
    common.add_argument("--model-dir")
    common.add_argument("--report-dir")
    common.add_argument("--embeddings", help="embedding text file (default: <data-dir>/embeddings.txt)")
    common.add_argument("-v", "--verbose", action="store_true")

    adapt = argparse.ArgumentParser(add_help=False)
    adapt.add_argument("--loss", choices=["ppl", "xent"])
    adapt.add_argument("--features", type=_features, help="comma-separated blocks from prev,prev-d,meta,cur")
    adapt.add_argument("--passes", type=int, choices=[1, 2])
    adapt.add_argument("--decay", type=float, help="decay for prev-d features")
    adapt.add_argument("--lm-scale", type=float)

    parser = argparse.ArgumentParser(prog="ctxlm", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("synth", parents=[common], help="write a seeded synthetic dataset")
    p.add_argument("--out", help="output directory (default: the data dir)")
    sub.add_parser("train-lms", parents=[common], help="train component LMs, static weights and classifier")
    sub.add_parser("train-adapter", parents=[common, adapt], help="train one context adapter")
    p = sub.add_parser("eval", parents=[common, adapt], help="evaluate all configured systems")
    p.add_argument("--split", default="test", choices=["dev", "test"])
    p.add_argument("--output", help="report file name inside the report dir (default: metrics.csv)")
    sub.add_parser("benchmark", parents=[common, adapt],
                   help="synth, train-lms, every needed adapter and eval in one go")
    return parser


def load_config(args: argparse.Namespace) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    overrides = {
        "seed": args.seed, "system": args.system, "data_dir": args.data_dir,
        "model_dir": args.model_dir, "report_dir": args.report_dir, "embeddings": args.embeddings,
    }
    for flag, key in (("loss", "loss"), ("features", "features"), ("passes", "passes"),
                      ("decay", "decay"), ("lm_scale", "lm_scale")):
        overrides[key] = getattr(args, flag, None)
    return cfg.override(**overrides)


def cmd_synth(cfg: PipelineConfig, args) -> None:
    out = Path(args.out) if args.out else cfg.data
    write_dataset(cfg.synth_config(), out)
    print(out)


def cmd_train_lms(cfg: PipelineConfig, args) -> None:
    print(train_lms(cfg))


def cmd_train_adapter(cfg: PipelineConfig, args) -> None:
    path, result = train_adapter(cfg)
    best = result.trace[result.best_epoch - 1]
    print(f"{path}\tepochs={len(result.trace)}\tbest_epoch={result.best_epoch}\tdev_loss={best.dev_loss:.6f}")


def cmd_eval(cfg: PipelineConfig, args) -> None:
    rows = evaluate(cfg, Workspace(cfg), args.split)
    write_report(cfg, rows, args.output or "metrics.csv")
    sys.stdout.write(format_report(rows))


def cmd_benchmark(cfg: PipelineConfig, args) -> None:
    rows, _ = run_benchmark(cfg)
    sys.stdout.write(format_report(rows))


COMMANDS = {
    "synth": cmd_synth,
    "train-lms": cmd_train_lms,
    "train-adapter": cmd_train_adapter,
    "eval": cmd_eval,
    "benchmark": cmd_benchmark,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
        COMMANDS[args.command](cfg, args)
    except CtxlmError as exc:
        return _fail(exc.tag, exc)
    except json.JSONDecodeError as exc:
        return _fail("config", f"{args.config}: {exc}")
    except OSError as exc:
        return _fail("io", exc)
    except (TypeError, ValueError) as exc:
        return _fail("config", exc)
    return 0


def _fail(tag: str, message) -> int:
    text = " ".join(str(message).split())
    print(f"error[{tag}]: {text}", file=sys.stderr)
    return 1


if __name__ == "__main__":
    sys.exit(main())
