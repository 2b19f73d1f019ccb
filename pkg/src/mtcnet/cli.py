"""Command-line entry point: ``mtcnet <subcommand> [options]``.

Exit codes: 0 success, 1 invalid input or usage, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import model as mdl
from .data import DatasetManifest, SynthSceneSpec, compute_count_range, read_annotation, write_synthetic_dataset
from .errors import MTCError, NaNLossError, TapeError
from .groundtruth import CountRange, HeadAnnotation, KernelConfig, count_group_label, downsample_sum, render_density_map
from .pnm import read_pnm
from .serialization import save_density
from .train import TrainConfig, ablation, evaluate, lambda_sweep, train, write_history_csv

log = logging.getLogger("mtcnet")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class UsageError(MTCError, ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _common(p):
    p.add_argument("--config", type=Path, help="JSON file with TrainConfig fields")
    p.add_argument("--seed", type=int)


def _train_flags(p):
    p.add_argument("--manifest", type=Path, default=Path("data/manifest.json"))
    p.add_argument("--preset", choices=sorted(mdl.PRESETS))
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", dest="learning_rate", type=float)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--batch-size", type=int)


def build_parser():
    parser = _Parser(prog="mtcnet", description="Multi-task crowd counting toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-gt", help="annotations -> DMAP density maps and count-group labels")
    _common(p)
    p.add_argument("annotations", nargs="*", type=Path)
    p.add_argument("--manifest", type=Path, help="process every entry of a manifest")
    p.add_argument("--out", type=Path, default=Path("gt"))
    p.add_argument("--mode", choices=("adaptive", "fixed"), default="adaptive")
    p.add_argument("--sigma", type=float, default=3.0, help="fixed / fallback sigma")
    p.add_argument("--downsample", type=int, default=1)
    p.add_argument("--size", type=int, nargs=2, metavar=("H", "W"),
                   help="image size when the annotation's image is unavailable")
    p.add_argument("--count-range", type=float, nargs=2, metavar=("MIN", "MAX"))

    p = sub.add_parser("synth", help="write a synthetic crowd dataset")
    _common(p)
    p.add_argument("--out", type=Path, default=Path("data"))
    p.add_argument("--images", type=int, default=8)
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--heads", type=int, nargs=2, default=(5, 40), metavar=("MIN", "MAX"))
    p.add_argument("--radius", type=float, default=2.0)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--test-fraction", type=float, default=0.25)

    p = sub.add_parser("train", help="train on the manifest's train split")
    _common(p)
    _train_flags(p)
    p.add_argument("--out", type=Path, default=Path("run"))

    p = sub.add_parser("eval", help="evaluate saved weights")
    _common(p)
    p.add_argument("--manifest", type=Path, default=Path("data/manifest.json"))
    p.add_argument("--weights", type=Path, default=Path("run/weights.mtcw"))
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--out", type=Path)

    p = sub.add_parser("sweep", help="train one model per loss weight")
    _common(p)
    _train_flags(p)
    p.add_argument("--lambdas", type=float, nargs="+")
    p.add_argument("--out", type=Path, default=Path("sweep"))

    p = sub.add_parser("ablate", help="main-only vs aux-only vs joint training")
    _common(p)
    _train_flags(p)
    p.add_argument("--out", type=Path, default=Path("ablation"))

    p = sub.add_parser("grad-check", help="finite-difference verification of every op")
    _common(p)
    p.add_argument("--skip-model", action="store_true")
    return parser


def load_config(args) -> TrainConfig:
    """Defaults, then ``--config`` JSON, then explicit flags."""
    values = {}
    if getattr(args, "config", None):
        with open(args.config) as fh:
            values.update(TrainConfig.from_dict(json.load(fh)).to_dict())
    values = {("lam" if k == "lambda" else k): v for k, v in values.items()}
    for key in ("preset", "epochs", "learning_rate", "lam", "batch_size", "seed"):
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = flag
    return TrainConfig(**values)


def _write_json(path, obj):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)


def _manifest_splits(path, cfg):
    manifest = DatasetManifest.load(path)
    count_range = compute_count_range(manifest)
    train_set = manifest.load_split("train", cfg.kernel)
    test_set = manifest.load_split("test", cfg.kernel) or None
    return manifest, count_range, train_set, test_set


def cmd_gen_gt(args):
    cfg = load_config(args)
    kernel = KernelConfig(mode=args.mode, fixed_sigma=args.sigma)
    items = []  # (annotation path, image path or None)
    if args.manifest:
        manifest = DatasetManifest.load(args.manifest)
        items += [(e.annotation, e.image) for e in manifest.train + manifest.test]
        count_range = compute_count_range(manifest)
    else:
        count_range = None
    for path in args.annotations:
        image, _ = read_annotation(path)
        items.append((path, image))
    if not items:
        raise UsageError("gen-gt needs annotation files or --manifest")
    parsed = []
    for ann_path, image in items:
        _, points = read_annotation(ann_path)
        if args.size:
            size = tuple(args.size)
        elif image is not None and Path(image).exists():
            size = read_pnm(image)[0].shape[:2]
        else:
            raise UsageError(f"{ann_path}: image not found; pass --size H W")
        parsed.append((Path(ann_path), HeadAnnotation(points, size)))
    if args.count_range:
        count_range = CountRange(*args.count_range)
    elif count_range is None and len({a.count for _, a in parsed}) > 1:
        counts = [a.count for _, a in parsed]
        count_range = CountRange(min(counts), max(counts))

    args.out.mkdir(parents=True, exist_ok=True)
    labels = {}
    for ann_path, ann in parsed:
        grid = render_density_map(ann, kernel).grid
        if args.downsample > 1:
            grid = downsample_sum(grid, args.downsample)
        save_density(grid, args.out / f"{ann_path.stem}.dmap")
        labels[ann_path.stem] = {
            "count": ann.count,
            "density_sum": float(grid.sum()),
            "label": None if count_range is None else count_group_label(ann.count, count_range),
        }
        print(f"{ann_path.stem}: {ann.count} heads, density sum {grid.sum():.6f}")
    meta = {"labels": labels, "count_range": None if count_range is None
            else [count_range.c_min, count_range.c_max], "seed": cfg.seed}
    _write_json(args.out / "labels.json", meta)
    return EXIT_OK


def cmd_synth(args):
    seed = 0 if args.seed is None else args.seed
    spec = SynthSceneSpec(size=args.size, head_count=tuple(args.heads), head_radius=args.radius,
                          noise=args.noise, seed=seed)
    path = write_synthetic_dataset(args.out, args.images, spec, args.test_fraction)
    print(f"wrote {args.images} images and {path}")
    return EXIT_OK


def cmd_train(args):
    cfg = load_config(args)
    _, count_range, train_set, test_set = _manifest_splits(args.manifest, cfg)
    result = train(train_set, cfg, count_range=count_range)
    args.out.mkdir(parents=True, exist_ok=True)
    mdl.save_weights(result.params, args.out / "weights.mtcw")
    write_history_csv(result.history, args.out / "loss.csv")
    report = {"train": result.report.to_dict(), "config": cfg.to_dict(),
              "count_range": [count_range.c_min, count_range.c_max]}
    if test_set:
        report["test"] = evaluate(result.params, test_set, count_range).to_dict()
    _write_json(args.out / "report.json", report)
    print(f"train MAE {result.report.mae:.4f}  MSE {result.report.mse:.4f}")
    if test_set:
        print(f"test  MAE {report['test']['mae']:.4f}  MSE {report['test']['mse']:.4f}")
    return EXIT_OK


def cmd_eval(args):
    cfg = load_config(args)
    manifest = DatasetManifest.load(args.manifest)
    count_range = compute_count_range(manifest)
    samples = manifest.load_split(args.split, cfg.kernel)
    if not samples:
        raise UsageError(f"split {args.split!r} is empty")
    params = mdl.load_weights(args.weights)
    report = evaluate(params, samples, count_range)
    print(f"{args.split} MAE {report.mae:.4f}  MSE {report.mse:.4f}  aux accuracy {report.accuracy:.4f}")
    if args.out:
        _write_json(args.out, report.to_dict())
    return EXIT_OK


def cmd_sweep(args):
    cfg = load_config(args)
    _, count_range, train_set, test_set = _manifest_splits(args.manifest, cfg)
    kwargs = {"lambdas": tuple(args.lambdas)} if args.lambdas else {}
    table = lambda_sweep(train_set, cfg, eval_samples=test_set, count_range=count_range, **kwargs)
    text = table.to_text()
    print(text)
    args.out.mkdir(parents=True, exist_ok=True)
    _write_json(args.out / "sweep.json", table.to_dict())
    (args.out / "sweep.txt").write_text(text + "\n")
    return EXIT_OK


def cmd_ablate(args):
    cfg = load_config(args)
    _, count_range, train_set, test_set = _manifest_splits(args.manifest, cfg)
    report = ablation(train_set, cfg, eval_samples=test_set, count_range=count_range)
    text = report.to_text()
    print(text)
    args.out.mkdir(parents=True, exist_ok=True)
    _write_json(args.out / "ablation.json", report.to_dict())
    (args.out / "ablation.txt").write_text(text + "\n")
    return EXIT_OK


def cmd_grad_check(args):
    from .gradcheck import run_model_check, run_op_checks

    seed = 0 if args.seed is None else args.seed
    reports = run_op_checks(seed)
    if not args.skip_model:
        reports += run_model_check(seed)
    ok = True
    for name, report in reports:
        ok &= report.passed
        print(f"{'PASS' if report.passed else 'FAIL'}  {name:40s} max err {report.max_error:.2e}")
    return EXIT_OK if ok else EXIT_RUNTIME


COMMANDS = {
    "gen-gt": cmd_gen_gt,
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "ablate": cmd_ablate,
    "grad-check": cmd_grad_check,
}


def _thread_limit():
    raw = os.environ.get("MTC_THREADS", "0")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"MTC_THREADS must be an integer, got {raw!r}") from None
    return n if n > 0 else None


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        limit = _thread_limit()
        if limit is None:
            return COMMANDS[args.command](args)
        from threadpoolctl import threadpool_limits
        with threadpool_limits(limits=limit):
            return COMMANDS[args.command](args)
    except (NaNLossError, TapeError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (MTCError, ValueError, OSError) as exc:
        # bad input: shapes, file formats, ranges, missing files
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
