"""``matseg`` command line: synth, train, eval, predict, bench, gradcheck.

Exit codes: 0 success, 1 runtime or data failure, 2 invalid arguments.
With ``--report PATH`` each command writes a JSON report; otherwise it
prints a short human-readable summary.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import __version__

logger = logging.getLogger("matseg")

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _size(text: str):
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}") from None
    if h < 16 or w < 16:
        raise argparse.ArgumentTypeError("size must be at least 16x16")
    return h, w


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _finite(obj):
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, dict):
        return {k: _finite(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_finite(v) for v in obj]
    return obj


def write_report(path, command: str, args: argparse.Namespace, result) -> None:
    config = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items()
              if k not in ("func", "report") and not callable(v)}
    doc = {"tool": "matseg", "version": __version__, "command": command, "config": config,
           "result": result}
    Path(path).write_text(json.dumps(_finite(doc), indent=2, allow_nan=False) + "\n")


def _pct(x: float) -> str:
    return f"{100.0 * x:.2f}%"


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    from .data import PhantomConfig, generate_phantom, save_dataset

    cfg = PhantomConfig(size=args.size, seed=args.seed, sector_angle=args.sector_angle,
                        lv_area_fraction=(args.area_min, args.area_max),
                        eccentricity=(args.ecc_min, args.ecc_max),
                        speckle_sigma=(args.speckle_min, args.speckle_max))
    try:
        cfg.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    divisor = 2 ** args.depth
    h, w = args.size
    if h % divisor or w % divisor:
        print(f"warning: size {h}x{w} is not divisible by {divisor} (2^depth for depth {args.depth}); "
              "models of that depth cannot consume these frames", file=sys.stderr)
    samples = [generate_phantom(cfg, i) for i in range(args.count)]
    save_dataset(samples, args.out)
    result = {"count": args.count, "out": str(args.out), "size": [h, w], "phantom": cfg.to_dict()}
    if args.report:
        write_report(args.report, "synth", args, result)
    print(f"wrote {args.count} image/mask pairs ({h}x{w}) to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .data import load_dataset
    from .models import UNetConfig
    from .pipeline import TrainConfig, train

    train_set = load_dataset(args.data)
    test_set = load_dataset(args.test_data) if args.test_data else []
    cfg = TrainConfig(epochs=args.epochs, batch_size=args.batch, lr=args.lr, matryoshka_weight=args.lam,
                      seed=args.seed, eval_every=args.eval_every, checkpoint_every=args.checkpoint_every,
                      model=args.model,
                      unet=UNetConfig(depth=args.depth, base_channels=args.base, seed=args.seed))
    try:
        cfg.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from exc

    def show(rec):
        line = f"epoch {rec.epoch:4d}  loss {rec.loss.total:.5f}  ({rec.seconds:.1f}s)"
        if rec.test_metrics:
            m = rec.test_metrics
            line += f"  test IoU {_pct(m.mean_iou)} Dice {_pct(m.mean_dice)} PA {_pct(m.mean_pixel_accuracy)}"
        print(line, flush=True)

    result = train(cfg, train_set, test_set, checkpoint_path=args.out, on_epoch=None if args.report else show)
    if args.report:
        write_report(args.report, "train", args, {"checkpoint": str(args.out), "history": result.history.as_list()})
    print(f"trained {cfg.model} for {len(result.history)} epochs; checkpoint written to {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .data import load_checkpoint, load_dataset
    from .pipeline import evaluate

    ckpt = load_checkpoint(args.ckpt)
    data = load_dataset(args.data)
    summary = evaluate(ckpt.model, data, threshold=args.threshold)
    if args.report:
        write_report(args.report, "eval", args, {"model": ckpt.model.kind, "metrics": summary.as_dict()})
    print(f"{ckpt.model.kind}: n={summary.n_images}  mean IoU {_pct(summary.mean_iou)}  "
          f"mean Dice {_pct(summary.mean_dice)}  mean pixel accuracy {_pct(summary.mean_pixel_accuracy)}")
    return EXIT_OK


def cmd_predict(args) -> int:
    from .data import load_checkpoint, load_images
    from .pipeline import predict_to_dir

    ckpt = load_checkpoint(args.ckpt)
    images = load_images(args.images)
    if not images:
        raise FileNotFoundError(f"no .pgm images found in {args.images}")
    written = predict_to_dir(ckpt.model, images, args.out, args.threshold, args.overlay)
    if args.report:
        write_report(args.report, "predict", args, {"n_images": len(images), "files": [str(p) for p in written]})
    print(f"wrote {len(written)} files for {len(images)} images to {args.out}")
    return EXIT_OK


def cmd_bench(args) -> int:
    from .data import load_checkpoint, load_dataset
    from .pipeline import benchmark

    if args.reps < 3:
        raise UsageError(f"--reps must be at least 3, got {args.reps}")
    ckpt = load_checkpoint(args.ckpt)
    data = load_dataset(args.data)
    rep = benchmark(ckpt.model, data, repetitions=args.reps, batch_size=args.batch)
    if args.report:
        write_report(args.report, "bench", args, {"model": ckpt.model.kind, "bench": rep.as_dict()})
    print(f"{ckpt.model.kind}: {rep.mean_inference_seconds * 1e3:.2f} ms/frame over {rep.n_frames} frames x "
          f"{rep.repetitions} reps; peak RSS {rep.peak_resident_memory_mb:.1f} MB")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite

    results = run_suite(args.module, args.seed)
    ok = all(r.passed for _, r in results)
    if args.report:
        write_report(args.report, "gradcheck", args,
                     {"passed": ok, "checks": [dict(group=g, **r.as_dict()) for g, r in results]})
    for g, r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {g:7s} {r.op_name:22s} max rel err {r.max_relative_error:.3e}")
    print(f"{sum(r.passed for _, r in results)}/{len(results)} checks passed")
    return EXIT_OK if ok else EXIT_FAILURE


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="matseg", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"matseg {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write synthetic echo phantoms as PGM pairs")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--count", type=_positive_int, default=10)
    p.add_argument("--size", type=_size, default=(112, 112), help="HxW (default 112x112)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--depth", type=_positive_int, default=4, help="model depth to check divisibility against")
    p.add_argument("--area-min", type=float, default=0.04)
    p.add_argument("--area-max", type=float, default=0.20)
    p.add_argument("--ecc-min", type=float, default=1.2)
    p.add_argument("--ecc-max", type=float, default=2.5)
    p.add_argument("--speckle-min", type=float, default=0.05)
    p.add_argument("--speckle-max", type=float, default=0.2)
    p.add_argument("--sector-angle", type=float, default=75.0)
    p.add_argument("--report", type=Path)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a Vanilla or MatAE U-Net")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--test-data", type=Path, help="held-out set evaluated every --eval-every epochs")
    p.add_argument("--model", choices=("vanilla", "matae"), default="vanilla")
    p.add_argument("--epochs", type=_positive_int, default=10)
    p.add_argument("--batch", type=_positive_int, default=4)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--lambda", dest="lam", type=float, default=0.1, help="Matryoshka loss weight (matae only)")
    p.add_argument("--depth", type=_positive_int, default=4)
    p.add_argument("--base", type=_positive_int, default=16, help="channels of the first encoder stage")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eval-every", type=int, default=1)
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--out", type=Path, required=True, help="checkpoint path")
    p.add_argument("--report", type=Path)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="IoU / Dice / pixel accuracy of a checkpoint on a dataset")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--report", type=Path)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="write predicted masks (and overlays)")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--images", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--overlay", action="store_true", help="also write PPM overlays of the mask boundary")
    p.add_argument("--report", type=Path)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("bench", help="time inference per frame")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--reps", type=int, default=3)
    p.add_argument("--batch", type=_positive_int, default=1)
    p.add_argument("--report", type=Path)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    p.add_argument("--module", choices=("all", "tensor", "layers", "models"), default="all")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--report", type=Path)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "threshold", 0.5) is not None and not 0.0 <= getattr(args, "threshold", 0.5) <= 1.0:
        print(f"error: --threshold must be in [0, 1], got {args.threshold}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
