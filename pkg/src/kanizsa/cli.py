"""Command-line entry point: ``kanizsa <command> [flags]``.

Exit codes: 0 ok, 2 bad flags, 3 I/O or file-format error, 4 generation
exhausted, 5 missing dataset, 6 numerical divergence, 7 gradient check failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import experiment as ex
from .dataset import FormatError, GenConfig, encode_png, generate_dataset, load_packed
from .geometry import DatasetKind, GenerationExhausted, Label, oracle_is_valid, sample_stimulus
from .nn import ARCHITECTURES, NumericalDivergence, evaluate, load_checkpoint, prepare_images
from .raster import RasterConfig, rasterize

EXIT_FLAGS, EXIT_IO, EXIT_EXHAUSTED, EXIT_MISSING, EXIT_DIVERGED, EXIT_GRADCHECK = 2, 3, 4, 5, 6, 7

log = logging.getLogger("kanizsa")


def parse_counts(text: str):
    try:
        counts = tuple(int(c) for c in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"counts must be T,V,E integers, got {text!r}")
    if len(counts) != 3 or any(c < 0 for c in counts):
        raise argparse.ArgumentTypeError(f"counts must be three non-negative integers: {text!r}")
    if any(c % 2 for c in counts):
        raise argparse.ArgumentTypeError(f"every split count must be even for exact balance: {text!r}")
    return counts


def parse_size(text: str):
    try:
        w, h = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"size must look like 64x64, got {text!r}")
    if w < 32 or h < 32:
        raise argparse.ArgumentTypeError("images must be at least 32x32")
    return w, h


def parse_seeds(text: str):
    """``3`` means seeds 0,1,2; ``4,7,9`` lists seeds explicitly."""
    try:
        if "," in text:
            return [int(s) for s in text.split(",")]
        return list(range(int(text)))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad seed list {text!r}")


def parse_kinds(text: str):
    try:
        return [DatasetKind(k.strip().lower()) for k in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"unknown dataset kind in {text!r}")


KIND_CHOICES = [k.value for k in DatasetKind] + ["all"]


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="master seed (default 0)")
    common.add_argument("--out-dir", default=None,
                        help="directory for results, run caches and config.lock (default: results)")
    common.add_argument("--data-dir", default=None,
                        help="dataset root (default: $KANIZSA_DATA_DIR or ./data)")
    common.add_argument("--threads", type=int, default=None, help="cap on BLAS worker threads")
    common.add_argument("--deterministic", action="store_true",
                        help="64-bit bit-reproducible mode; wall times are not recorded")
    common.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")

    training = argparse.ArgumentParser(add_help=False)
    training.add_argument("--size", type=parse_size, default=(64, 64),
                          help="dataset image size WxH (default 64x64)")
    training.add_argument("--downscale", type=int, default=1,
                          help="mean-pool factor applied at load time (4 turns 256 into 64)")
    training.add_argument("--lr", type=float, default=0.01, help="SGD learning rate (default 0.01)")
    training.add_argument("--batch-size", type=int, default=8, help="minibatch size (default 8)")
    training.add_argument("--arch", choices=sorted(ARCHITECTURES), default="gmp",
                          help="classifier head: global max pool (default) or flatten-dense")
    training.add_argument("--max-epochs", type=int, default=300, help="epoch cap (default 300)")
    training.add_argument("--target", type=float, default=0.95,
                          help="validation accuracy target (default 0.95)")
    training.add_argument("--patience", type=int, default=None,
                          help="stop this many epochs after the best post-target val loss")

    p = argparse.ArgumentParser(prog="kanizsa", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=[common], help="render datasets to disk")
    g.add_argument("--kind", choices=KIND_CHOICES, default="all",
                   help="dataset family; 'all' = offs, angle, rot, comb")
    g.add_argument("--counts", type=parse_counts, default=(8000, 2000, 2000),
                   help="train,val,test sample counts, each even (default 8000,2000,2000)")
    g.add_argument("--size", type=parse_size, default=(64, 64), help="image size WxH")
    g.add_argument("--supersample", type=int, choices=(1, 2, 4, 8), default=8,
                   help="anti-aliasing samples per axis (default 8)")
    g.add_argument("--offset-direction", choices=("parallel", "toward"), default="parallel",
                   help="OFFS translation direction relative to the opposite side")
    g.add_argument("--no-png", action="store_true", help="skip per-sample PNG files")
    g.add_argument("--out", default=None, help="dataset root (overrides --data-dir)")

    r = sub.add_parser("render", parents=[common], help="write one valid/invalid PNG pair")
    r.add_argument("--kind", choices=[k.value for k in DatasetKind], default="comb")
    r.add_argument("--size", type=parse_size, default=(256, 256), help="image size WxH")
    r.add_argument("--supersample", type=int, choices=(1, 2, 4, 8), default=4)
    r.add_argument("--out", required=True,
                   help="output file; writes <stem>_valid.png and <stem>_invalid.png")

    t = sub.add_parser("train", parents=[common, training], help="train one model")
    t.add_argument("--kind", choices=[k.value for k in DatasetKind], required=True)

    e = sub.add_parser("eval", parents=[common], help="test error of a checkpoint")
    e.add_argument("--checkpoint", required=True, help="model .knzm file")
    e.add_argument("--dataset", required=True,
                   help="dataset directory (uses its test split) or a .knz file")
    e.add_argument("--split", choices=("train", "val", "test"), default="test")
    e.add_argument("--downscale", type=int, default=1)

    m = sub.add_parser("matrix", parents=[common, training], help="train x test error matrix")
    m.add_argument("--seeds", type=parse_seeds, default=[0, 1, 2],
                   help="seed count (3 -> 0,1,2) or comma list")

    c = sub.add_parser("convergence", parents=[common, training],
                       help="epochs to the validation target per kind")
    c.add_argument("--kinds", type=parse_kinds, default=parse_kinds("offs,angle,rot"))
    c.add_argument("--seeds", type=parse_seeds, default=[0, 1, 2])

    cb = sub.add_parser("comb", parents=[common, training], help="COMB convergence report")
    cb.add_argument("--seeds", type=parse_seeds, default=[0, 1, 2])

    mn = sub.add_parser("mnist", parents=[common, training], help="MNIST reference run")
    mn.add_argument("--mnist-dir", default=None,
                    help="directory holding the four MNIST IDX files (default <data-dir>/mnist)")

    gc = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    gc.add_argument("--configs", type=int, default=100, help="number of random layer configs")
    return p


def data_root(args) -> Path:
    return Path(args.data_dir or os.environ.get("KANIZSA_DATA_DIR") or "data")


def write_lock(directory: Path, args) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    resolved = {k: (list(v) if isinstance(v, tuple) else v) for k, v in vars(args).items()
                if k != "func"}
    resolved = json.loads(json.dumps(resolved, default=str))
    (directory / "config.lock").write_text(json.dumps(resolved, indent=2, sort_keys=True) + "\n")


def experiment_config(args) -> ex.ExperimentConfig:
    w, h = args.size
    return ex.ExperimentConfig(
        data_root=str(data_root(args)), out_dir=args.out_dir or "results", image_size=(h, w),
        downscale=args.downscale, learning_rate=args.lr, batch_size=args.batch_size,
        max_epochs=args.max_epochs, target_val_accuracy=args.target, patience=args.patience,
        deterministic=args.deterministic, architecture=ARCHITECTURES[args.arch]())


def cmd_generate(args) -> int:
    root = Path(args.out) if args.out else data_root(args)
    kinds = ([DatasetKind.OFFS, DatasetKind.ANGLE, DatasetKind.ROT, DatasetKind.COMB]
             if args.kind == "all" else [DatasetKind(args.kind)])
    w, h = args.size
    from .geometry import GeometryRanges
    ranges = GeometryRanges(offset_direction=args.offset_direction)
    for kind in kinds:
        cfg = GenConfig(kind=kind, counts=args.counts, image=RasterConfig(w, h, args.supersample),
                        ranges=ranges, master_seed=args.seed, write_png=not args.no_png)
        manifest = generate_dataset(cfg, root / kind.value)
        invalid = sum(r.label for r in manifest)
        print(f"{kind.value}: {len(manifest)} images ({len(manifest) - invalid} valid, "
              f"{invalid} invalid) -> {root / kind.value}")
    write_lock(root, args)
    return 0


def cmd_render(args) -> int:
    from .dataset import derive_seed, sample_rng
    w, h = args.size
    cfg = RasterConfig(w, h, args.supersample)
    gen = GenConfig(kind=args.kind, counts=(0, 0, 0), image=cfg)
    out = Path(args.out)
    stem = out.with_suffix("")
    for label in (Label.VALID, Label.INVALID):
        stim = sample_stimulus(sample_rng(derive_seed(args.seed, 0, int(label))), label,
                               DatasetKind(args.kind), gen.ranges)
        path = Path(f"{stem}_{label.name.lower()}.png")
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(encode_png(rasterize(stim, cfg).to_array()))
        print(f"{path}: label={label.name.lower()} oracle_valid={oracle_is_valid(stim)} "
              f"perturbation={stim.record.kind.value}")
    return 0


def cmd_train(args) -> int:
    cfg = experiment_config(args)
    write_lock(Path(cfg.out_dir), args)
    res = ex.run_training(cfg, args.kind, args.seed, reuse=False)
    print(f"{res.kind} seed {res.seed}: {res.outcome}, selected epoch {res.selected_epoch}, "
          f"checkpoint {res.checkpoint}")
    return EXIT_DIVERGED if res.outcome == "Diverged" else 0


def cmd_eval(args) -> int:
    path = Path(args.dataset)
    if path.is_dir():
        path = path / f"{args.split}.knz"
    if not path.exists():
        raise ex.MissingDataset(f"{path} not found")
    net = load_checkpoint(args.checkpoint)
    images, labels = load_packed(path)
    err = evaluate(net, prepare_images(images, args.downscale), labels.astype("int64"))
    print(f"test error {100 * err:.4f}% on {len(labels)} samples ({path})")
    return 0


def cmd_matrix(args) -> int:
    cfg = experiment_config(args)
    write_lock(Path(cfg.out_dir), args)
    matrix = ex.run_matrix(cfg, args.seeds)
    print(matrix.to_markdown(), end="")
    return 0


def cmd_convergence(args) -> int:
    cfg = experiment_config(args)
    write_lock(Path(cfg.out_dir), args)
    reports = ex.run_convergence(args.kinds, args.seeds, cfg)
    for rep in reports:
        print(f"{rep.kind}: epochs to target {rep.epochs_to_target}, median {rep.median_epochs}, "
              f"failures {rep.failures}")
    kinds = {r.kind for r in reports}
    if {"offs", "angle", "rot"} <= kinds:
        for k, ok in ex.ordering_holds(reports).items():
            print(f"ordering offs >= {k}: {'holds' if ok else 'VIOLATED'}")
    return 0


def cmd_comb(args) -> int:
    cfg = experiment_config(args)
    write_lock(Path(cfg.out_dir), args)
    rep = ex.run_comb(cfg, args.seeds)
    print(f"comb: epochs to target {rep.epochs_to_target}, median {rep.median_epochs}, "
          f"failures {rep.failures}")
    for seed, errs in rep.extra["test_error_by_kind"].items():
        parts = ", ".join(f"{k} {100 * v:.1f}%" for k, v in errs.items())
        print(f"  seed {seed}: {parts}")
    return 0


def cmd_mnist(args) -> int:
    cfg = experiment_config(args)
    write_lock(Path(cfg.out_dir), args)
    rep = ex.run_mnist_reference(cfg, seed=args.seed, mnist_root=args.mnist_dir)
    print(f"mnist: subset sizes {rep.extra['subset_sizes']}, epochs to 95% val "
          f"{rep.epochs_to_target[0]}, epochs to <5% test error "
          f"{rep.extra['epochs_to_test_error_below_5pct']}")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import TOLERANCE, fixed_three_layer_check, run_suite
    results = [fixed_three_layer_check(args.seed)] + run_suite(args.configs, seed=args.seed)
    worst = max(results, key=lambda r: r.max_rel_error)
    failed = [r for r in results if not r.ok]
    print(f"gradcheck: {len(results)} configs, max relative error {worst.max_rel_error:.3e} "
          f"({worst.worst_param}), tolerance {TOLERANCE:g}, failures {len(failed)}")
    return EXIT_GRADCHECK if failed else 0


COMMANDS = {"generate": cmd_generate, "render": cmd_render, "train": cmd_train,
            "eval": cmd_eval, "matrix": cmd_matrix, "convergence": cmd_convergence,
            "comb": cmd_comb, "mnist": cmd_mnist, "gradcheck": cmd_gradcheck}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    limiter = None
    if args.threads:
        from threadpoolctl import threadpool_limits
        limiter = threadpool_limits(args.threads)
    try:
        return COMMANDS[args.command](args)
    except ex.MissingDataset as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except NumericalDivergence as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except GenerationExhausted as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_EXHAUSTED
    except (OSError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FLAGS
    finally:
        if limiter is not None:
            limiter.unregister()


if __name__ == "__main__":
    sys.exit(main())
