"""Command-line entry point: ``l2caf <subcommand> [flags]``.

Exit codes: 0 success, 2 usage error, 3 model/method incompatibility, 4 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import experiments as ex
from .attention import CafConfig
from .data import dump_dataset, generate_shapes
from .errors import IncompatibleModelError, ModelFileError
from .evaluation import heatmap_box, write_metrics_csv
from .images import draw_box, overlay, pgm_bytes, ppm_bytes, read_pnm
from .modelio import load_model, save_model
from .network import build_preset

EXIT_OK, EXIT_USAGE, EXIT_INCOMPATIBLE, EXIT_IO = 0, 2, 3, 4

logger = logging.getLogger("l2caf")


class UsageError(Exception):
    pass


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def _nonneg_int(text: str) -> int:
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"expected a nonnegative integer, got {text}")
    return value


def _positive_float(text: str) -> float:
    value = float(text)
    if not value > 0:
        raise argparse.ArgumentTypeError(f"expected a positive number, got {text}")
    return value


def _fraction(text: str) -> float:
    value = float(text)
    if not 0 < value < 1:
        raise argparse.ArgumentTypeError(f"expected a value in (0, 1), got {text}")
    return value


def _noise(text: str) -> float:
    value = float(text)
    if not 0 <= value <= 1:
        raise argparse.ArgumentTypeError(f"noise amplitude must lie in [0, 1], got {text}")
    return value


def _add_caf_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("filter optimization")
    g.add_argument("--lr", type=_positive_float, default=1000.0, help="gradient-descent step (default 1000)")
    g.add_argument("--absolute", action="store_true",
                   help="descend on the unscaled loss instead of dividing by the output size")
    g.add_argument("--mu-lr", type=_positive_float, default=1.0,
                   help="step for the Gaussian filter centre, in cells (default 1)")
    g.add_argument("--epsilon", type=_positive_float, default=1e-5, help="convergence tolerance (default 1e-5)")
    g.add_argument("--window", type=_positive_int, default=50, help="convergence window d (default 50)")
    g.add_argument("--max-iters", type=_positive_int, default=1000, help="iteration cap (default 1000)")
    g.add_argument("--at-layer", type=_nonneg_int, default=None, help="filter layer index (default: last conv map)")


def _add_data_flags(p: argparse.ArgumentParser, n_default: int, n_flag: str = "--n-images") -> None:
    g = p.add_argument_group("synthetic data")
    g.add_argument(n_flag, dest="n", type=_positive_int, default=n_default, help=f"number of samples (default {n_default})")
    g.add_argument("--noise", type=_noise, default=0.2, help="background noise amplitude (default 0.2)")
    g.add_argument("--image-size", type=int, default=32, help="image side in pixels (default 32)")


def _caf_config(args) -> CafConfig:
    if args.max_iters < args.window + 1:
        raise UsageError("--max-iters must exceed --window")
    return CafConfig(args.lr, args.epsilon, args.window, args.max_iters, ex.derive_seed(args.seed, 10),
                     not args.absolute, args.mu_lr)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="l2caf", description="Constrained attention filters for toy CNNs.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a preset on synthetic shapes")
    p.add_argument("kind", choices=ex.TRAIN_KINDS)
    p.add_argument("--out", required=True, type=Path, help="output .tnet model")
    p.add_argument("--log", type=Path, default=None, help="loss log CSV (default: <out>.loss.csv)")
    p.add_argument("--epochs", type=_nonneg_int, default=None)
    p.add_argument("--train-lr", type=_positive_float, default=None, help="SGD step size")
    p.add_argument("--frames", type=_positive_int, default=3, help="frames per event for rnn (default 3)")
    p.add_argument("--seed", type=int, default=0)
    _add_data_flags(p, 2000, "--n-train")

    p = sub.add_parser("visualize", help="write heatmaps and overlays for generated or given images")
    p.add_argument("--model", required=True, type=Path)
    p.add_argument("--method", dest="methods", action="append", choices=ex.METHODS,
                   help="repeatable (default: l2caf-fast)")
    p.add_argument("--image", dest="images", action="append", type=Path, default=None,
                   help="P6 image file; repeatable (default: generated images)")
    p.add_argument("--class", dest="target_class", type=_nonneg_int, default=None,
                   help="target class for class-specific methods (default: predicted)")
    p.add_argument("--theta", type=_fraction, default=0.2, help="box threshold fraction (default 0.2)")
    p.add_argument("--out", required=True, type=Path, help="output directory")
    p.add_argument("--seed", type=int, default=0)
    _add_data_flags(p, 4)
    _add_caf_flags(p)

    p = sub.add_parser("eval-wsol", help="localization accuracy per method")
    p.add_argument("--model", required=True, type=Path)
    p.add_argument("--methods", nargs="+", choices=ex.METHODS, default=None)
    p.add_argument("--theta", type=_fraction, default=0.2)
    p.add_argument("--top-k", type=_positive_int, default=1)
    p.add_argument("--out", required=True, type=Path, help="output directory")
    p.add_argument("--seed", type=int, default=0)
    _add_data_flags(p, 500, "--n-test")
    _add_caf_flags(p)

    p = sub.add_parser("bench", help="per-image wall-clock time of vanilla/fast L2-CAF and Grad-CAM")
    p.add_argument("--model", type=Path, default=None, help="model file (default: untrained tiny-deep)")
    p.add_argument("--methods", nargs="+", choices=ex.BENCH_METHODS, default=list(ex.BENCH_METHODS))
    p.add_argument("--out", required=True, type=Path, help="output directory")
    p.add_argument("--seed", type=int, default=0)
    _add_data_flags(p, 10)
    _add_caf_flags(p)

    p = sub.add_parser("sanity", help="heatmaps after randomizing the logits layer or all weights")
    p.add_argument("--model", required=True, type=Path)
    p.add_argument("--scopes", nargs="+", choices=ex.SCOPES, default=list(ex.SCOPES))
    p.add_argument("--trials", type=_positive_int, default=3, help="random seeds per scope (default 3)")
    p.add_argument("--image-index", type=_nonneg_int, default=0)
    p.add_argument("--out", required=True, type=Path, help="output directory")
    p.add_argument("--seed", type=int, default=0)
    _add_data_flags(p, 1)
    _add_caf_flags(p)

    p = sub.add_parser("gen-data", help="dump a synthetic dataset as P6 images plus a manifest")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--seed", type=int, default=0)
    _add_data_flags(p, 100)
    return parser


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def cmd_train(args) -> int:
    history: list = []
    model = ex.train_preset(args.kind, args.seed, epochs=args.epochs, lr=args.train_lr, n_train=args.n,
                            noise_sigma=args.noise, image_size=args.image_size, frames=args.frames,
                            history=history)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    save_model(model, args.out)
    log = args.log or args.out.with_suffix(".loss.csv")
    _write_csv(log, ["epoch", "loss"], [(e, repr(float(v))) for e, v in history])
    print(f"wrote {args.out} and {log}")
    return EXIT_OK


def _images_for(model, args, stream: int):
    """Inputs for ``model``: given files, or a seeded synthetic split (sequences for recurrent models)."""
    if getattr(args, "images", None):
        return np.stack([read_pnm(p) for p in args.images]), None, None
    frames = model.input_shape[0] if model.is_recurrent else None
    size = model.input_shape[-3]
    return ex.shapes_split(args.seed, stream, args.n, args.noise, size, frames)


def cmd_visualize(args) -> int:
    from .attention import heatmap_from_filter, optimize_recurrent_sequence

    model = load_model(args.model)
    methods = args.methods or ["l2caf-fast"]
    for m in methods:
        ex.check_method(model, m)
    images, _, _ = _images_for(model, args, ex.STREAM_TEST_DATA)
    cfg = _caf_config(args)
    args.out.mkdir(parents=True, exist_ok=True)
    rows = []

    def emit(image_id: str, method: str, image: np.ndarray, heat: np.ndarray) -> None:
        box = heatmap_box(heat, args.theta)
        (args.out / f"{image_id}_{method}.pgm").write_bytes(pgm_bytes(heat))
        (args.out / f"{image_id}_{method}.ppm").write_bytes(ppm_bytes(draw_box(overlay(image, heat), box)))
        rows.append([image_id, method, *(box.as_tuple() if box else ("", "", "", ""))])

    for i, x in enumerate(images):
        if model.is_recurrent:
            if methods != ["l2caf-fast"] and methods != ["l2caf"]:
                raise IncompatibleModelError("recurrent models support the l2caf methods only")
            results = optimize_recurrent_sequence(model, list(x), cfg, args.at_layer)
            for t, res in enumerate(results):
                emit(f"{i:05d}_t{t}", methods[0], x[t], heatmap_from_filter(res, x.shape[-3:-1]))
            continue
        for m in methods:
            emit(f"{i:05d}", m, x, ex.method_heatmap(model, x, m, cfg, args.target_class, at_layer=args.at_layer))
    _write_csv(args.out / "boxes.csv", ["image_id", "method", "x_min", "y_min", "x_max", "y_max"], rows)
    print(f"wrote {len(rows)} heatmaps to {args.out}")
    return EXIT_OK


def cmd_eval_wsol(args) -> int:
    model = load_model(args.model)
    if model.is_recurrent:
        raise IncompatibleModelError("eval-wsol works on single-image models")
    default = ex.RET_METHODS if model.head.kind == "embedding" else ex.CLS_METHODS
    methods = args.methods or list(default)
    images, labels, boxes = _images_for(model, args, ex.STREAM_TEST_DATA)
    report = ex.evaluate_wsol(model, images, labels, boxes, methods, _caf_config(args), args.theta, args.top_k)
    args.out.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(args.out / "metrics.csv", report.rows())
    first = "R@1" if report.kind == "retrieval" else f"CLS top-{args.top_k}"
    header = ["method", first, "NMI", "LOC", "delta"]
    table = [[s.method, f"{s.accuracy:.4f}", "" if s.nmi is None else f"{s.nmi:.4f}", f"{s.loc:.4f}",
              "" if s.delta is None else f"{s.delta:+.4f}"] for s in report.summaries]
    _write_csv(args.out / "summary.csv", header, table)
    widths = [max(len(r[i]) for r in [header] + table) for i in range(len(header))]
    for r in [header] + table:
        print("  ".join(v.ljust(w) for v, w in zip(r, widths)))
    return EXIT_OK


def cmd_bench(args) -> int:
    model = load_model(args.model) if args.model else build_preset("tiny-deep", ex.derive_seed(args.seed, ex.STREAM_INIT),
                                                                    image_size=args.image_size)
    if model.is_recurrent:
        raise IncompatibleModelError("bench works on single-image models")
    if args.n < 10:
        logger.warning("fewer than 10 images: medians will be noisy")
    images, _, _ = _images_for(model, args, ex.STREAM_TEST_DATA)
    rows = ex.bench(model, images, args.methods, _caf_config(args))
    args.out.mkdir(parents=True, exist_ok=True)
    # wall-clock seconds are kept apart so that heatmaps.csv stays byte-reproducible
    _write_csv(args.out / "heatmaps.csv", ["image_id", "method", "iterations", "heatmap_sha256"],
               [(r.image_id, r.method, r.iterations, r.heatmap_digest) for r in rows])
    _write_csv(args.out / "timing.csv", ["image_id", "method", "seconds"],
               [(r.image_id, r.method, f"{r.seconds:.6f}") for r in rows])
    medians = ex.median_seconds(rows)
    for m, s in medians.items():
        print(f"{m:12s} median {s:.4f} s/image")
    if "l2caf" in medians and "l2caf-fast" in medians:
        print(f"fast speedup {medians['l2caf'] / medians['l2caf-fast']:.2f}x")
    return EXIT_OK


def cmd_sanity(args) -> int:
    model = load_model(args.model)
    if model.is_recurrent:
        raise IncompatibleModelError("sanity checks work on single-image models")
    args.n = max(args.n, args.image_index + 1)
    images, _, _ = _images_for(model, args, ex.STREAM_TEST_DATA)
    x = images[args.image_index]
    seeds = [ex.derive_seed(args.seed, 20, k) for k in range(args.trials)]
    reference, rows, maps = ex.sanity(model, x, args.scopes, seeds, _caf_config(args))
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "trained.pgm").write_bytes(pgm_bytes(reference))
    for (scope, seed), heat in maps.items():
        (args.out / f"{scope}_{seed}.pgm").write_bytes(pgm_bytes(heat))
    _write_csv(args.out / "sanity.csv", ["scope", "seed", "spearman"],
               [(r.scope, r.seed, repr(r.spearman)) for r in rows])
    for r in rows:
        print(f"{r.scope:12s} seed {r.seed:<10d} spearman {r.spearman:+.4f}")
    return EXIT_OK


def cmd_gen_data(args) -> int:
    samples = generate_shapes(args.n, args.image_size, args.image_size, noise_sigma=args.noise,
                              seed=ex.derive_seed(args.seed, ex.STREAM_TEST_DATA))
    manifest = dump_dataset(samples, args.out)
    print(f"wrote {len(samples)} images and {manifest}")
    return EXIT_OK


COMMANDS = {"train": cmd_train, "visualize": cmd_visualize, "eval-wsol": cmd_eval_wsol,
            "bench": cmd_bench, "sanity": cmd_sanity, "gen-data": cmd_gen_data}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except IncompatibleModelError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INCOMPATIBLE
    except (ModelFileError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (UsageError, ValueError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
