"""Command-line entry point: ``htnet {train,eval,predict,synth,inspect,gradcheck}``.

Machine-readable payloads go to stdout, logs and human summaries to stderr.
Exit codes: 0 success, 1 runtime failure, 2 usage or config error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import checkpoint, gradcheck
from .data import PoseSample, PoseSet, PoseSetError, load_poseset, save_poseset, synth_generate
from .metrics import AlignmentError, evaluate
from .model import (
    ConfigError,
    ModelConfig,
    init_params,
    param_breakdown,
    param_count,
    predict_mm,
)
from .skeleton import get_skeleton
from .train import TrainConfig, TrainingError, train

log = logging.getLogger("htnet")


class UsageError(Exception):
    pass


def load_run_config(path: str | None) -> tuple[ModelConfig, TrainConfig]:
    """Read ``{"model": {...}, "train": {...}}``; absent keys take defaults."""
    doc = {}
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(doc, dict):
            raise UsageError(f"config {path} must be a JSON object")
        extra = set(doc) - {"model", "train"}
        if extra:
            raise UsageError(f"unknown config sections: {sorted(extra)}")
    try:
        return (ModelConfig.from_dict(doc.get("model", {})),
                TrainConfig.from_dict(doc.get("train", {})))
    except (ValueError, TypeError) as exc:
        raise UsageError(f"invalid config: {exc}") from exc


def _emit(payload) -> None:
    sys.stdout.write(json.dumps(payload, indent=2) + "\n")


def cmd_train(args) -> int:
    model_cfg, train_cfg = load_run_config(args.config)
    overrides = {
        "epochs": args.epochs, "batch_size": args.batch_size,
        "learning_rate": args.lr, "seed": args.seed, "max_steps": args.max_steps,
    }
    try:
        train_cfg = replace(train_cfg, **{k: v for k, v in overrides.items() if v is not None})
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    data = load_poseset(args.data, get_skeleton(model_cfg.skeleton))
    params = init_params(model_cfg, seed=train_cfg.seed)
    log.info("training %d parameters on %d frames", param_count(params), len(data))
    result = train(params, data, train_cfg, out_dir=args.out)
    out = Path(args.out)
    (out / "config.json").write_text(json.dumps(
        {"model": model_cfg.to_dict(), "train": train_cfg.to_dict()}, indent=2))
    _emit({"checkpoint": str(out / "model.htnc"), "trace": str(out / "loss.csv"),
           "steps": len(result.trace), "final_loss": result.trace[-1].loss})
    return 0


def _load_for_inference(args):
    params = checkpoint.load(args.ckpt)
    spec = get_skeleton(params.config.skeleton)
    data = load_poseset(args.data, spec)
    return params, spec, data


def cmd_eval(args) -> int:
    params, spec, data = _load_for_inference(args)
    _, gt = data.arrays()
    pred = predict_mm(params, data.normalized_inputs(), spec)
    report = evaluate(pred, gt, spec)
    if args.csv:
        sys.stdout.write(report.CSV_HEADER + "\n" + report.to_csv_row() + "\n")
    else:
        sys.stdout.write(report.to_json() + "\n")
    print(f"MPJPE {report.mpjpe:.2f} mm  P-MPJPE {report.p_mpjpe:.2f} mm  "
          f"PCK {report.pck:.1f}  AUC {report.auc:.1f}", file=sys.stderr)
    return 0


def cmd_predict(args) -> int:
    params, spec, data = _load_for_inference(args)
    pred = predict_mm(params, data.normalized_inputs(), spec) if len(data) else []
    out = PoseSet([PoseSample(s.p2d, p - p[spec.root_index]) for s, p in zip(data.samples, pred)],
                  skeleton=data.skeleton, image_size=data.image_size)
    save_poseset(out, args.out)
    _emit({"out": args.out, "frames": len(out)})
    return 0


def cmd_synth(args) -> int:
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    data = synth_generate(args.n, seed=args.seed, noise_mm=args.noise_mm)
    save_poseset(data, args.out)
    _emit({"out": args.out, "frames": len(data)})
    return 0


def cmd_inspect(args) -> int:
    model_cfg, _ = load_run_config(args.config)
    overrides = {k: v for k, v in (("channels", args.channels), ("mixers", args.mixers),
                                   ("structure", args.structure)) if v is not None}
    try:
        model_cfg = replace(model_cfg, **overrides)
    except ConfigError as exc:
        raise UsageError(str(exc)) from exc
    params = init_params(model_cfg, seed=0)
    breakdown = param_breakdown(params)
    total = param_count(params)
    _emit({"config": model_cfg.to_dict(), "total": total, "blocks": breakdown})
    width = max(len(k) for k in breakdown)
    for k, v in breakdown.items():
        print(f"{k:<{width}}  {v:>10,}", file=sys.stderr)
    print(f"{'total':<{width}}  {total:>10,}", file=sys.stderr)
    return 0


def cmd_gradcheck(args) -> int:
    results = gradcheck.check_ops(args.seed) + gradcheck.check_model(args.seed)
    _emit({"tolerance": gradcheck.TOLERANCE, "checks": [
        {"name": r.name, "rel_error": r.rel_error, "entries": r.entries, "ok": r.ok}
        for r in results]})
    failed = [r for r in results if not r.ok]
    worst = max(r.rel_error for r in results)
    print(f"{len(results) - len(failed)}/{len(results)} gradient checks passed "
          f"(worst relative error {worst:.2e})", file=sys.stderr)
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="htnet", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and write checkpoint + loss trace")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--max-steps", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="print a metrics report for a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--csv", action="store_true", help="emit a CSV row instead of JSON")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="write predicted 3D poses as a PoseSet")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("synth", help="generate a synthetic PoseSet")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise-mm", type=float, default=0.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("inspect", help="parameter count per block")
    p.add_argument("--config")
    p.add_argument("--channels", type=int)
    p.add_argument("--mixers", type=int)
    p.add_argument("--structure", choices=("progressive", "parallel", "serial"))
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"htnet {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except checkpoint.CheckpointError as exc:
        print(f"htnet {args.command}: corrupt checkpoint: {exc}", file=sys.stderr)
        return 1
    except (PoseSetError, TrainingError, AlignmentError, ConfigError) as exc:
        print(f"htnet {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
