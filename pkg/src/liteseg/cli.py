"""Command-line entry point: ``liteseg {train,infer,eval,bench,gradcheck}``.

Exit codes are 0 on success, 1 for usage errors and 2 for runtime failures.
With ``--json`` a single report ``{command, config, metrics, timings}`` is
printed to stdout instead of the human-readable summary.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import gradcheck as gc
from .bench import bench
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import IMAGENET_MEAN, IMAGENET_STD, normalize, read_manifest, rgb_to_chw
from .imageio import UnsupportedImageError, make_palette, read_image, read_label, write_label
from .metrics import evaluate_pairs, miou
from .model import PRESETS, build_model, infer_resized, model_input_size
from .tensor import NonFiniteError, ShapeError
from .train import TrainConfig, TrainingDivergedError, make_dataset, train, write_curve

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2

RUNTIME_ERRORS = (
    CheckpointError, OSError, ValueError, ShapeError, NonFiniteError, TrainingDivergedError, UnsupportedImageError,
)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def parse_size(text: str) -> Tuple[int, int]:
    """``"512x1024"`` -> (512, 1024)."""
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}") from None
    if h < 1 or w < 1:
        raise argparse.ArgumentTypeError(f"size must be positive, got {text!r}")
    return h, w


def _positive(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="liteseg", description="Real-time semantic segmentation engine.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--json", action="store_true", help="print a machine-readable report")

    t = sub.add_parser("train", help="train a model from a JSON config")
    t.add_argument("--config", help="training config JSON (defaults to the desk-scale setup)")
    t.add_argument("--out", required=True, help="checkpoint path to write")
    t.add_argument("--seed", type=int, help="overrides the config seed")
    t.add_argument("--iters", type=_positive, help="overrides the config iteration count")
    t.add_argument("--curve", help="write the loss curve as CSV")
    common(t)

    i = sub.add_parser("infer", help="segment one image")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--image", required=True)
    i.add_argument("--out", required=True, help="mask file (PNG/PPM/PGM)")
    i.add_argument("--palette", action="store_true", help="write a colour mask instead of class indices")
    i.add_argument("--size", type=parse_size, help="model input HxW (default: nearest multiple of 32)")
    common(i)

    e = sub.add_parser("eval", help="mIoU over a manifest of image/label pairs")
    e.add_argument("--ckpt", help="model to evaluate; optional when the manifest lists predictions")
    e.add_argument("--manifest", required=True)
    e.add_argument("--num-classes", type=_positive, help="class count when no checkpoint is given")
    e.add_argument("--size", type=parse_size, help="model input HxW (default: nearest multiple of 32)")
    e.add_argument("--workers", type=_positive, help="parallel workers (capped by LITESEG_THREADS)")
    common(e)

    b = sub.add_parser("bench", help="end-to-end latency and FPS")
    src = b.add_mutually_exclusive_group(required=True)
    src.add_argument("--ckpt")
    src.add_argument("--preset", choices=sorted(PRESETS), help="benchmark freshly initialised weights")
    b.add_argument("--size", type=parse_size, default=(512, 1024), help="inference resolution HxW")
    b.add_argument("--original-size", type=parse_size, help="input image HxW before resizing")
    b.add_argument("--runs", type=_positive, default=50)
    b.add_argument("--warmup", type=_positive, default=10)
    common(b)

    g = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--case", action="append", choices=gc.case_names(), help="run only these cases")
    common(g)
    return p


# ---------------------------------------------------------------------------
# subcommands; each returns (exit code, report)
# ---------------------------------------------------------------------------

def _report(command, config, metrics, timings):
    return {"command": command, "config": config, "metrics": metrics, "timings": timings}


def cmd_train(args) -> Tuple[int, dict]:
    cfg = TrainConfig.load(args.config) if args.config else TrainConfig()
    seed = cfg.seed if args.seed is None else args.seed
    iters = cfg.iters if args.iters is None else args.iters
    cfg = replace(cfg, seed=seed, iters=iters)
    dataset = make_dataset(cfg.dataset)
    model = build_model(cfg.model, seed=seed)
    t0 = time.perf_counter()
    result = train(model, dataset, iters, cfg, seed=seed)
    elapsed = time.perf_counter() - t0
    save_checkpoint(result.model, args.out, result.optimizer)
    if args.curve:
        write_curve(args.curve, result.curve)
    losses = np.array([p.loss for p in result.curve])
    window = max(1, min(50, len(losses) // 2))
    metrics = {
        "iters": iters,
        "seed": seed,
        "initial_loss": float(losses[:window].mean()),
        "final_loss": float(losses[-window:].mean()),
        "parameters": model.num_parameters(),
    }
    if not args.json:
        print(f"trained {iters} iters: loss {metrics['initial_loss']:.4f} -> {metrics['final_loss']:.4f}")
        print(f"checkpoint written to {args.out}")
    return EXIT_OK, _report("train", cfg.to_dict(), metrics, [{"stage": "train", "ms": elapsed * 1000}])


def _prepare(rgb: np.ndarray) -> np.ndarray:
    return normalize(rgb_to_chw(rgb), IMAGENET_MEAN, IMAGENET_STD)


def cmd_infer(args) -> Tuple[int, dict]:
    t0 = time.perf_counter()
    model = load_checkpoint(args.ckpt)
    t1 = time.perf_counter()
    rgb = read_image(args.image)
    h, w = rgb.shape[:2]
    size = args.size or model_input_size(h, w)
    labels = infer_resized(model, _prepare(rgb), size)
    t2 = time.perf_counter()
    palette = make_palette(model.cfg.num_classes) if args.palette else None
    write_label(args.out, labels.astype(np.uint8), palette)
    counts = np.bincount(labels.reshape(-1), minlength=model.cfg.num_classes)
    metrics = {"input_size": [h, w], "model_size": list(size), "class_pixels": counts.tolist()}
    if not args.json:
        print(f"wrote {args.out} ({h}x{w}, model input {size[0]}x{size[1]})")
    timings = [{"stage": "load", "ms": (t1 - t0) * 1000}, {"stage": "infer", "ms": (t2 - t1) * 1000}]
    return EXIT_OK, _report("infer", model.cfg.to_dict(), metrics, timings)


def cmd_eval(args) -> Tuple[int, dict]:
    entries = read_manifest(args.manifest)
    if not entries:
        raise ValueError(f"{args.manifest}: manifest is empty")
    model = load_checkpoint(args.ckpt) if args.ckpt else None
    if model is None:
        if args.num_classes is None:
            raise UsageError("eval: --num-classes is required without --ckpt")
        missing = [e.image for e in entries if e.prediction is None]
        if missing:
            raise UsageError(f"eval: {len(missing)} manifest entries have no prediction column; pass --ckpt")
    k = model.cfg.num_classes if model is not None else args.num_classes

    def predict_fn(entry):
        gt = read_label(entry.label)
        if model is None:
            return read_label(entry.prediction), gt
        rgb = read_image(entry.image)
        size = args.size or model_input_size(*rgb.shape[:2])
        return infer_resized(model, _prepare(rgb), size), gt

    t0 = time.perf_counter()
    cm = evaluate_pairs(entries, k, predict_fn, args.workers)
    elapsed = time.perf_counter() - t0
    mean, per_class = miou(cm)
    metrics = {
        "miou": mean,
        "per_class_iou": [None if np.isnan(v) else float(v) for v in per_class],
        "pixels": cm.total,
        "images": len(entries),
    }
    if not args.json:
        for cls, v in enumerate(per_class):
            print(f"class {cls:3d}  IoU {'n/a' if np.isnan(v) else f'{v:.4f}'}")
        print(f"mIoU {mean:.4f}")
    config = model.cfg.to_dict() if model is not None else {"num_classes": k}
    return EXIT_OK, _report("eval", config, metrics, [{"stage": "eval", "ms": elapsed * 1000}])


def cmd_bench(args) -> Tuple[int, dict]:
    model = load_checkpoint(args.ckpt) if args.ckpt else build_model(PRESETS[args.preset])
    rep = bench(model, args.size, args.warmup, args.runs, args.original_size)
    metrics = {k: v for k, v in rep.to_dict().items() if k != "per_run_ms"}
    metrics["parameters"] = model.num_parameters()
    if not args.json:
        h, w = rep.resolution
        print(f"resolution {h}x{w}  runs {rep.timed_runs}  mean {rep.mean_ms:.2f} ms  "
              f"min {rep.min_ms:.2f}  max {rep.max_ms:.2f}  FPS {rep.fps:.2f}")
    timings = [{"stage": "run", "ms": ms} for ms in rep.per_run_ms]
    return EXIT_OK, _report("bench", model.cfg.to_dict(), metrics, timings)


def cmd_gradcheck(args) -> Tuple[int, dict]:
    results = gc.run_suite(args.seed, args.case)
    failed = [r.name for r in results if not r.passed]
    if not args.json:
        for r in results:
            print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:34s} rel err {r.max_rel_error:.2e}  ({r.checked} elems)")
        print(f"{len(results) - len(failed)}/{len(results)} cases passed")
    metrics = {
        "cases": len(results),
        "failed": failed,
        "max_rel_error": max(r.max_rel_error for r in results),
        "per_case": {r.name: r.max_rel_error for r in results},
    }
    timings = [{"stage": r.name, "ms": r.seconds * 1000} for r in results]
    code = EXIT_OK if not failed else EXIT_RUNTIME
    return code, _report("gradcheck", {"seed": args.seed, "tolerance": gc.TOLERANCE}, metrics, timings)


COMMANDS = {"train": cmd_train, "infer": cmd_infer, "eval": cmd_eval, "bench": cmd_bench, "gradcheck": cmd_gradcheck}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        code, report = COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"liteseg: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except RUNTIME_ERRORS as exc:
        print(f"liteseg {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    if args.json:
        print(json.dumps(report, indent=2))
    return code


def run(argv: Optional[List[str]] = None) -> None:
    sys.exit(main(argv))
