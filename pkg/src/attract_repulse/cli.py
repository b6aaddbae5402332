"""Command-line entry point: ``attract-repulse <subcommand> ...``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import harness
from .config import load_config
from .data import load_cifar10_binary
from .exceptions import CheckpointError, FormatError, InvalidInputError
from .gradcheck import run_suite
from .model import predict_proba, tencrop_predict
from .train import evaluate, top1


def _eval_data(cfg, data_arg):
    """Evaluation set: CIFAR-10 test split from ``data_arg`` or the config's own eval split."""
    if data_arg:
        ds = load_cifar10_binary(Path(data_arg), split="test")
    else:
        _, ds = harness.load_datasets(cfg)
    return ds.to_float(cfg.augment.policy), ds.labels, ds


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    res = harness.run_training(cfg, args.out, resume=args.resume, eval_every=args.eval_every)
    f = res.final
    print(f"run dir: {res.run_dir}")
    print(f"final epoch {f.epoch}: student top-1 {f.student_top1:.2f}%  teacher top-1 {f.teacher_top1:.2f}%")
    return 0


def cmd_eval(args) -> int:
    ckpt = harness.load_checkpoint(args.ckpt)
    cfg = ckpt.config
    x, y, _ = _eval_data(cfg, args.data)
    student, _ = harness.model_from_checkpoint(args.ckpt, "student")
    teacher, _ = harness.model_from_checkpoint(args.ckpt, "teacher")
    acc = evaluate(student, teacher, x, y, use_fusion=not args.no_fusion,
                   fusion_weight=cfg.loss.fusion_weight, use_tencrop=args.tencrop,
                   crop_size=args.crop_size or cfg.eval.tencrop_size)
    print(f"student top-1 {acc['student_top1']:.2f}%  teacher top-1 {acc['teacher_top1']:.2f}%")
    return 0


def cmd_ablate(args) -> int:
    cfg = load_config(args.config)
    seeds = [int(s) for s in args.seeds.split(",") if s]
    ladder = args.stages.split(",") if args.stages else harness.LADDER
    report = harness.run_ablation(cfg, ladder, seeds, args.out, jobs=args.jobs,
                                  eval_every=args.eval_every)
    print(report.render(), end="")
    print(f"ladder monotone within noise: {report.is_monotone()}")
    return 1 if report.failures else 0


def cmd_gradcheck(args) -> int:
    results = run_suite(args.cases, args.seed, tiny_model=args.tiny_model)
    for r in results:
        print(r.line())
    return 0 if all(r.passed for r in results) else 1


def cmd_ensemble(args) -> int:
    paths = [p for p in args.ckpts.split(",") if p]
    probs, y = [], None
    for p in paths:
        model, cfg = harness.model_from_checkpoint(p, args.which)
        x, y, _ = _eval_data(cfg, args.data)
        w = cfg.loss.fusion_weight if cfg.eval.use_fusion else 0.0
        if args.tencrop:
            probs.append(tencrop_predict(model, x, cfg.eval.tencrop_size, w).numpy())
        else:
            probs.append(predict_proba(model, x, w).numpy())
        print(f"{p}: top-1 {top1(probs[-1], y):.2f}%")
    avg = harness.ensemble_average(probs)
    print(f"ensemble of {len(paths)}: top-1 {top1(avg, y):.2f}%")
    return 0


def cmd_plot(args) -> int:
    for p in harness.plot_run(args.run):
        print(p)
    return 0


def cmd_export(args) -> int:
    model, cfg = harness.model_from_checkpoint(args.ckpt, args.which)
    x, y, _ = _eval_data(cfg, args.data)
    print(harness.export_features(model, x, y, args.out))
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="attract-repulse", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one configuration")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--out", help="run directory (default: derived from the config digest)")
    p.add_argument("--eval-every", type=int, default=1)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", help="CIFAR-10 binary directory (default: the config's eval split)")
    p.add_argument("--tencrop", action="store_true")
    p.add_argument("--crop-size", type=int)
    p.add_argument("--no-fusion", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run the cumulative component ladder over seeds")
    p.add_argument("--config", required=True)
    p.add_argument("--seeds", default="1,2,3")
    p.add_argument("--stages", help=f"comma list, default {','.join(harness.LADDER)}")
    p.add_argument("--out")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--eval-every", type=int, default=0)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference check of every loss gradient")
    p.add_argument("--tiny-model", action="store_true", help="also check the end-to-end tiny model")
    p.add_argument("--cases", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ensemble", help="average predictions of several checkpoints")
    p.add_argument("--ckpts", required=True)
    p.add_argument("--data")
    p.add_argument("--which", choices=("student", "teacher"), default="student")
    p.add_argument("--tencrop", action="store_true")
    p.set_defaults(func=cmd_ensemble)

    p = sub.add_parser("plot", help="write SVG figures for a run or ablation directory")
    p.add_argument("--run", required=True)
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("export-features", help="dump penultimate features to CSV")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data")
    p.add_argument("--out", required=True)
    p.add_argument("--which", choices=("student", "teacher"), default="student")
    p.set_defaults(func=cmd_export)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (InvalidInputError, FormatError, CheckpointError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
