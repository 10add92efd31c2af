"""Command-line entry point: train, eval, infer, report."""

from __future__ import annotations

import argparse
import os
import sys

from rrcdet.backbone import ConfigError
from rrcdet.checkpoint import CheckpointError
from rrcdet.config import load_config
from rrcdet.experiment import (
    TrainingDiverged,
    infer_files,
    load_detector,
    train,
    validate,
    write_loss_report,
    write_validation_reports,
)


def _parse_float_list(text):
    return [float(v) for v in text.split(",") if v.strip()]


def _parse_int_list(text):
    return [int(v) for v in text.split(",") if v.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rrcdet",
        description="Detector with recurrent rolling feature aggregation")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a model from a config")
    p_train.add_argument("--config", required=True)
    p_train.add_argument("--resume", help="checkpoint to continue from")
    p_train.add_argument("--out", help="output directory "
                         "(default: <config stem>_run)")
    p_train.add_argument("--quiet", action="store_true")

    p_eval = sub.add_parser("eval", help="validation losses and AP sweep")
    p_eval.add_argument("--config", required=True)
    p_eval.add_argument("--ckpt", required=True)
    p_eval.add_argument("--thresholds", type=_parse_float_list,
                        help="comma-separated IoU thresholds")
    p_eval.add_argument("--select", type=_parse_int_list,
                        help="comma-separated output indices to fuse")
    p_eval.add_argument("--out", default="eval_out")
    p_eval.add_argument("--max-images", type=int)

    p_infer = sub.add_parser("infer", help="detect on PPM images")
    p_infer.add_argument("--config", required=True)
    p_infer.add_argument("--ckpt", required=True)
    p_infer.add_argument("--out", required=True)
    p_infer.add_argument("files", nargs="+")
    p_infer.add_argument("--score-threshold", type=float)

    p_report = sub.add_parser("report", help="tables from a training log")
    p_report.add_argument("--log", required=True)
    p_report.add_argument("--out", required=True)
    p_report.add_argument("--tail", type=int, default=0,
                          help="use only the last N steps (0 = all)")
    return parser


def _cmd_train(args) -> int:
    config = load_config(args.config)
    out_dir = args.out
    if out_dir is None:
        stem = os.path.splitext(os.path.basename(args.config))[0]
        out_dir = stem + "_run"

    def progress(step, report):
        if not args.quiet and (step % 50 == 0 or step + 1 == config["train.steps"]):
            print(f"step {step}: total {report.total:.4f}", flush=True)

    result = train(config, out_dir, resume=args.resume, progress=progress)
    print(f"trained {result.steps} steps in {result.seconds:.1f}s")
    print(f"loss log: {result.log_path}")
    print(f"checkpoint: {result.checkpoint_path}")
    return 0


def _cmd_eval(args) -> int:
    config = load_config(args.config)
    detector = load_detector(config, args.ckpt)
    selects = [tuple(args.select)] if args.select else None
    report = validate(detector, selects=selects, thresholds=args.thresholds,
                      max_images=args.max_images)
    write_validation_reports(report, args.out)
    print(report.loss_table_text())
    for sel, table in report.tables.items():
        print(f"\nfusion over outputs {list(sel)}")
        print(table.to_text())
    print(f"\nreports written to {args.out}")
    return 0


def _cmd_infer(args) -> int:
    config = load_config(args.config)
    detector = load_detector(config, args.ckpt)
    written, errors = infer_files(detector, args.files, args.out,
                                  score_threshold=args.score_threshold)
    for path, message in errors:
        print(f"error: {path}: {message}", file=sys.stderr)
    print(f"wrote {len(written)} result file(s) to {args.out}")
    return 0 if written or not errors else 1


def _cmd_report(args) -> int:
    print(write_loss_report(args.log, args.out, tail=args.tail))
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handlers = {"train": _cmd_train, "eval": _cmd_eval,
                "infer": _cmd_infer, "report": _cmd_report}
    try:
        return handlers[args.command](args)
    except (ConfigError, CheckpointError, TrainingDiverged, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
