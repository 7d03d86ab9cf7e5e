"""Command-line entry point: data generation, preprocessing, training,
cross-validation, evaluation, saliency rendering, gradient checks and report
bundling. Exit codes: 0 success, 1 validation error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import shlex
import shutil
import sys
from pathlib import Path

import numpy as np

from . import gradcheck
from .datagen import CLASS_NAMES, generate_dataset
from .estimators import NotFittedError
from .imageproc import apply_mask
from .nets import CheckpointError, UNetConfig, load_checkpoint, save_checkpoint
from .optim import TrainConfig
from .pgm import ImageFormatError, read_image, write_pgm
from .pipeline import (SchemeConfig, load_manifest, prepare_input, preprocess_channels,
                       read_config_file, run_crossval, scheme_from_mapping, train_segmentation,
                       write_config_file, write_evaluation, write_history_csv, evaluate_scores)
from .saliency import saliency_map, write_saliency

_VALIDATION_ERRORS = (ValueError, KeyError, FileNotFoundError, NotADirectoryError,
                      ImageFormatError, CheckpointError, NotFittedError)


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse default exits 2; flag problems are validation errors
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _build_parser() -> _Parser:
    parser = _Parser(prog="cxrpipe", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--out", required=out_required, help="output directory")

    p = sub.add_parser("gen-data", help="generate a synthetic phantom dataset")
    p.add_argument("--n", type=int, help="images per class")
    p.add_argument("--counts", help="comma-separated per-class counts (COVID19,MERS,SARS)")
    p.add_argument("--size", type=int, default=64)
    common(p)

    p = sub.add_parser("preprocess", help="apply an enhancement scheme to one image")
    p.add_argument("--image", required=True)
    p.add_argument("--prep", default="clahe",
                   choices=["original", "clahe", "complement", "3channel"])
    p.add_argument("--mask", help="optional binary mask applied after enhancement")
    common(p)

    p = sub.add_parser("train-seg", help="train the U-Net lung segmenter")
    p.add_argument("--manifest", required=True)
    p.add_argument("--base-channels", type=int, default=16)
    p.add_argument("--depth", type=int, default=4)
    p.add_argument("--max-epochs", type=int, default=50)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=4)
    common(p)

    def cls_flags(p):
        p.add_argument("--manifest", required=True)
        p.add_argument("--scheme", default="plain", choices=["plain", "segmented"])
        p.add_argument("--prep", default="original",
                       choices=["original", "clahe", "complement", "3channel"])
        p.add_argument("--family", default="fire",
                       choices=["fire", "residual", "inception", "dense"])
        p.add_argument("--input-size", type=int, default=64)
        p.add_argument("--width", type=int, default=16)
        p.add_argument("--blocks", type=int, default=3)
        p.add_argument("--optimizer", default="sgd", choices=["sgd", "adam"])
        p.add_argument("--max-epochs", type=int, default=20)
        p.add_argument("--lr", type=float, default=1e-3)
        p.add_argument("--batch-size", type=int, default=4)
        p.add_argument("--seg-checkpoint", help="U-Net checkpoint for mask prediction")

    p = sub.add_parser("train-cls", help="train one classifier on an 80/20 split")
    cls_flags(p)
    common(p)

    p = sub.add_parser("crossval", help="k-fold cross-validation of one scheme")
    cls_flags(p)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--jobs", type=int, default=1, help="parallel fold jobs")
    common(p)

    p = sub.add_parser("evaluate", help="evaluate a classifier checkpoint on a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--seg-checkpoint")
    common(p)

    p = sub.add_parser("saliency", help="render a class-activation map for one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--mask", help="mask for segmented-scheme checkpoints")
    p.add_argument("--method", default="scorecam", choices=["scorecam", "gradcam"])
    p.add_argument("--target-class", type=int, help="default: predicted class")
    p.add_argument("--tap", help="tap layer name (default: last conv)")
    common(p)

    p = sub.add_parser("grad-check", help="finite-difference check of engine ops")
    p.add_argument("--op", default="all",
                   choices=["all"] + list(gradcheck.registered_ops()))
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--eps", type=float, default=1e-5)
    common(p, out_required=False)

    p = sub.add_parser("report", help="bundle crossval outputs and saliency renderings")
    p.add_argument("--run", required=True, help="crossval output directory")
    p.add_argument("--manifest", help="manifest for saliency samples")
    p.add_argument("--saliency-count", type=int, default=3)
    p.add_argument("--method", default="scorecam", choices=["scorecam", "gradcam"])
    common(p)
    return parser


# ------------------------------------------------------------------ commands

def _scheme_config(args) -> SchemeConfig:
    cfg = SchemeConfig(scheme=args.scheme, preprocessing=args.prep, family=args.family,
                       input_size=args.input_size, width=args.width, blocks=args.blocks,
                       optimizer=args.optimizer, seg_checkpoint=args.seg_checkpoint,
                       train=TrainConfig(learning_rate=args.lr, batch_size=args.batch_size,
                                         max_epochs=args.max_epochs, seed=args.seed))
    if args.config:
        cfg = scheme_from_mapping(read_config_file(args.config), base=cfg)
    return cfg


def _cmd_gen_data(args):
    if (args.n is None) == (args.counts is None):
        raise ValueError("give exactly one of --n or --counts")
    if args.counts:
        parts = [int(x) for x in args.counts.split(",")]
        if len(parts) != len(CLASS_NAMES):
            raise ValueError(f"--counts needs {len(CLASS_NAMES)} values")
        counts = dict(zip(CLASS_NAMES, parts))
    else:
        counts = int(args.n)
    manifest = generate_dataset(args.out, counts, seed=args.seed, size=args.size)
    print(f"wrote {manifest}")


def _cmd_preprocess(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    img = read_image(args.image)
    chans = preprocess_channels(img, args.prep)
    if args.mask:
        chans = apply_mask(chans, read_image(args.mask))
    stem = Path(args.image).stem
    for c in range(chans.shape[0]):
        suffix = f".{args.prep}.ch{c}.pgm" if chans.shape[0] > 1 else f".{args.prep}.pgm"
        write_pgm(out / f"{stem}{suffix}", chans[c])
        print(f"wrote {out / (stem + suffix)}")


def _cmd_train_seg(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = load_manifest(args.manifest)
    manifest.verify(require_masks=True)
    train_cfg = TrainConfig(learning_rate=args.lr, batch_size=args.batch_size,
                            max_epochs=args.max_epochs, seed=args.seed)
    if args.config:
        overrides = read_config_file(args.config)
        train_cfg = scheme_from_mapping(overrides, base=SchemeConfig(train=train_cfg)).train
    seg = train_segmentation(manifest,
                             unet_cfg=UNetConfig(base_channels=args.base_channels,
                                                 depth=args.depth, seed=args.seed),
                             train_cfg=train_cfg)
    save_checkpoint(seg.model_, out / "checkpoint.ckpt",
                    meta={"epoch": seg.best_epoch_, "best_val_loss": seg.best_val_loss_,
                          "seed": args.seed, "task": "segmentation"})
    write_history_csv(seg.history_, out / "log.csv")
    print(f"best val loss {seg.best_val_loss_:.6f} at epoch {seg.best_epoch_}")


def _cmd_train_cls(args):
    from .pipeline import train_classifier

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = _scheme_config(args)
    manifest = load_manifest(args.manifest)
    manifest.verify(require_masks=(cfg.scheme == "segmented" and cfg.seg_checkpoint is None))
    clf = train_classifier(manifest, cfg, seed=args.seed)
    save_checkpoint(clf.model_, out / "checkpoint.ckpt",
                    meta={"epoch": clf.best_epoch_, "best_val_loss": clf.best_val_loss_,
                          "seed": args.seed, "scheme": cfg.scheme,
                          "preprocessing": cfg.preprocessing, "family": cfg.family,
                          "input_size": cfg.input_size})
    write_history_csv(clf.history_, out / "log.csv")
    write_config_file(cfg, out / "config.txt")
    print(f"best val loss {clf.best_val_loss_:.6f} at epoch {clf.best_epoch_}")


def _cmd_crossval(args):
    cfg = _scheme_config(args)
    result = run_crossval(args.manifest, cfg, k=args.k, seed=args.seed,
                          out_dir=args.out, jobs=args.jobs)
    write_config_file(cfg, Path(args.out) / "config.txt")
    acc = result.report.overall["accuracy"]
    print(f"overall accuracy {acc.value:.4f} +/- {acc.half_width:.4f} (n={acc.n})")


def _cmd_evaluate(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model, meta = load_checkpoint(args.checkpoint)
    cfg = SchemeConfig(scheme=meta.get("scheme", "plain"),
                       preprocessing=meta.get("preprocessing", "original"),
                       family=meta.get("family", "fire"),
                       input_size=int(meta.get("input_size", 64)),
                       seg_checkpoint=args.seg_checkpoint)
    if args.config:
        cfg = scheme_from_mapping(read_config_file(args.config), base=cfg)
    manifest = load_manifest(args.manifest)
    manifest.verify(require_masks=(cfg.scheme == "segmented" and cfg.seg_checkpoint is None))
    from .pipeline import load_classification_arrays

    X, y = load_classification_arrays(manifest, range(len(manifest)), cfg)
    from . import engine

    with engine.no_grad():
        scores = np.concatenate([model.forward(X[i:i + 32], train=False).data
                                 for i in range(0, len(X), 32)])
    result = evaluate_scores(scores, y, np.arange(len(manifest)), scores.shape[1])
    write_evaluation(result, out, scores.shape[1])
    acc = result.report.overall["accuracy"]
    print(f"overall accuracy {acc.value:.4f} +/- {acc.half_width:.4f} (n={acc.n})")


def _cmd_saliency(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model, meta = load_checkpoint(args.checkpoint)
    cfg = SchemeConfig(scheme=meta.get("scheme", "plain"),
                       preprocessing=meta.get("preprocessing", "original"),
                       family=meta.get("family", "fire"),
                       input_size=int(meta.get("input_size", 64)))
    img = read_image(args.image)
    mask = read_image(args.mask) if args.mask else None
    x = prepare_input(img, mask, cfg)
    if args.target_class is None:
        from . import engine

        with engine.no_grad():
            target = int(model.forward(x[None], train=False).data[0].argmax())
    else:
        target = args.target_class
    sal = saliency_map(model, x, target, args.method, tap=args.tap)
    pgm_path, csv_path = write_saliency(sal, out / Path(args.image).stem)
    print(f"class {target} via {sal.method} at tap {sal.tap}: wrote {pgm_path} and {csv_path}")


def _cmd_grad_check(args):
    ops = gradcheck.registered_ops() if args.op == "all" else (args.op,)
    worst_ratio = 0.0
    lines = []
    for op in ops:
        err = gradcheck.grad_check(op, trials=args.trials, eps=args.eps, seed=args.seed)
        tol = gradcheck.default_tolerance(op)
        status = "ok" if err < tol else "FAIL"
        worst_ratio = max(worst_ratio, err / tol)
        line = f"{op}: max relative error {err:.3e} (tolerance {tol:.0e}) {status}"
        print(line)
        lines.append(line)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "grad_check.txt").write_text("\n".join(lines) + "\n")
    if worst_ratio >= 1.0:
        raise RuntimeError("gradient check exceeded tolerance")


def _cmd_report(args):
    run_dir = Path(args.run)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if not run_dir.is_dir():
        raise NotADirectoryError(f"run directory {run_dir} does not exist")
    copied = 0
    for pattern in ("metrics.csv", "confusion.csv", "roc_*.csv", "predictions.csv",
                    "config.txt", "fold*/log.csv"):
        for src in sorted(run_dir.glob(pattern)):
            dst = out / src.relative_to(run_dir)
            dst.parent.mkdir(parents=True, exist_ok=True)
            shutil.copyfile(src, dst)
            copied += 1
    if copied == 0:
        raise ValueError(f"{run_dir} holds no report artifacts (run crossval first)")
    if args.manifest and args.saliency_count > 0:
        ckpts = sorted(run_dir.glob("fold*/checkpoint.ckpt"))
        if ckpts:
            model, meta = load_checkpoint(ckpts[0])
            cfg = SchemeConfig(scheme=meta.get("scheme", "plain"),
                               preprocessing=meta.get("preprocessing", "original"),
                               family=meta.get("family", "fire"),
                               input_size=int(meta.get("input_size", 64)))
            manifest = load_manifest(args.manifest)
            step = max(1, len(manifest) // args.saliency_count)
            sal_dir = out / "saliency"
            sal_dir.mkdir(exist_ok=True)
            from . import engine

            for i in list(range(0, len(manifest), step))[:args.saliency_count]:
                img = read_image(manifest.image_path(i))
                mask = read_image(manifest.mask_path(i)) if (
                    cfg.scheme == "segmented" and manifest.records[i].mask_path) else None
                x = prepare_input(img, mask, cfg)
                with engine.no_grad():
                    target = int(model.forward(x[None], train=False).data[0].argmax())
                sal = saliency_map(model, x, target, args.method)
                write_saliency(sal, sal_dir / Path(manifest.records[i].path).stem)
    print(f"report bundled into {out}")


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "preprocess": _cmd_preprocess,
    "train-seg": _cmd_train_seg,
    "train-cls": _cmd_train_cls,
    "crossval": _cmd_crossval,
    "evaluate": _cmd_evaluate,
    "saliency": _cmd_saliency,
    "grad-check": _cmd_grad_check,
    "report": _cmd_report,
}


def _existing_files(out_dir: Path) -> set:
    if not out_dir.exists():
        return set()
    return {p for p in out_dir.rglob("*") if p.is_file()}


def _remove_new_outputs(out_dir: Path, before: set):
    # failed runs must not leave partial outputs behind
    if not out_dir.exists():
        return
    for p in sorted(out_dir.rglob("*"), reverse=True):
        if p.is_file() and p not in before:
            p.unlink()
        elif p.is_dir() and not any(p.iterdir()):
            p.rmdir()
    if not any(out_dir.iterdir()):
        out_dir.rmdir()


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = _build_parser().parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 1
    out_dir = Path(args.out) if getattr(args, "out", None) else None
    before = _existing_files(out_dir) if out_dir else set()
    try:
        _COMMANDS[args.command](args)
    except _VALIDATION_ERRORS as exc:
        if out_dir:
            _remove_new_outputs(out_dir, before)
        print(f"cxrpipe {args.command}: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - runtime failures map to exit 2
        if out_dir:
            _remove_new_outputs(out_dir, before)
        print(f"cxrpipe {args.command}: runtime failure: {exc}", file=sys.stderr)
        return 2
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "run.txt").write_text(
            "cxrpipe " + " ".join(shlex.quote(a) for a in argv) + "\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
