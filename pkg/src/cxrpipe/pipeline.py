"""Experimental protocol: manifests, stratified 5-fold splits, class-balancing
augmentation, scheme preprocessing (plain vs segmented), training runs, and
cross-validated evaluation with accumulated confusion and pooled ROC data.

Fold jobs are independent and deterministic given (seed, fold_id), so serial
and parallel execution produce byte-identical reports.
"""

from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass, field, replace
from multiprocessing import get_context
from pathlib import Path

import numpy as np

from .datagen import CLASS_NAMES
from .estimators import CNNClassifier, UNetSegmenter
from .imageproc import AugmentSpec, apply_mask, augment, clahe, complement, \
    compose_3channel, resize_bilinear
from .metrics import (ConfusionMatrix, RocResult, build_report, roc_curve, roc_micro_average,
                      write_confusion_csv, write_metrics_csv, write_roc_csv)
from .nets import load_checkpoint, save_checkpoint
from .optim import TrainConfig
from .pgm import read_image

SEG_LABELS = ("FG", "BG")
VALID_LABELS = CLASS_NAMES + SEG_LABELS

SCHEMES = ("plain", "segmented")
PREPROCESSINGS = ("original", "clahe", "complement", "3channel")


# ------------------------------------------------------------------ manifest

@dataclass
class ManifestRecord:
    path: str
    label: str
    mask_path: str | None = None


@dataclass
class DatasetManifest:
    root: Path
    records: list[ManifestRecord]

    def __len__(self):
        return len(self.records)

    def image_path(self, i: int) -> Path:
        return self.root / self.records[i].path

    def mask_path(self, i: int) -> Path | None:
        mp = self.records[i].mask_path
        return self.root / mp if mp else None

    def label_indices(self) -> np.ndarray:
        return np.array([CLASS_NAMES.index(r.label) for r in self.records], dtype=np.int64)

    def has_masks(self) -> bool:
        return all(r.mask_path for r in self.records)

    def verify(self, require_masks: bool = False, check_dims: bool = False,
               check_sums: bool = False):
        """Check that paths resolve, labels are declared, and (optionally)
        that masks match image dimensions and checksums hold."""
        for i, rec in enumerate(self.records):
            if rec.label not in VALID_LABELS:
                raise ValueError(f"record {i}: unknown label {rec.label!r}")
            if not self.image_path(i).exists():
                raise FileNotFoundError(f"record {i}: missing image {self.image_path(i)}")
            if require_masks and not rec.mask_path:
                raise ValueError(f"record {i}: mask required but not listed")
            if rec.mask_path and not self.mask_path(i).exists():
                raise FileNotFoundError(f"record {i}: missing mask {self.mask_path(i)}")
            if check_dims and rec.mask_path:
                if read_image(self.image_path(i)).shape != read_image(self.mask_path(i)).shape:
                    raise ValueError(f"record {i}: mask dimensions differ from image")
        if check_sums:
            sums = self.root / "checksums.sha256"
            if sums.exists():
                for line in sums.read_text().splitlines():
                    digest, rel = line.split(None, 1)
                    actual = hashlib.sha256((self.root / rel.strip()).read_bytes()).hexdigest()
                    if actual != digest:
                        raise ValueError(f"checksum mismatch for {rel.strip()}")


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    records = []
    with open(path, newline="") as fh:
        rd = csv.DictReader(fh)
        if rd.fieldnames is None or [f.strip() for f in rd.fieldnames[:3]] != ["path", "label", "mask_path"]:
            raise ValueError(f"{path}: manifest must have header path,label,mask_path")
        for row in rd:
            records.append(ManifestRecord(path=row["path"].strip(), label=row["label"].strip(),
                                          mask_path=(row["mask_path"] or "").strip() or None))
    return DatasetManifest(root=path.parent, records=records)


def save_manifest(manifest: DatasetManifest, path):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["path", "label", "mask_path"])
        for rec in manifest.records:
            wr.writerow([rec.path, rec.label, rec.mask_path or ""])


# --------------------------------------------------------------------- folds

@dataclass
class FoldSplit:
    fold_id: int
    train_idx: np.ndarray
    val_idx: np.ndarray
    test_idx: np.ndarray


def make_folds(manifest: DatasetManifest, k: int = 5, seed: int = 0) -> list[FoldSplit]:
    """Stratified k-fold splits: per-class test chunks differing by at most
    one sample, with 20% of the remaining training pool held out for
    validation. Deterministic for a given seed."""
    labels = [r.label for r in manifest.records]
    by_class: dict[str, np.ndarray] = {}
    for name in sorted(set(labels)):
        idx = np.array([i for i, lb in enumerate(labels) if lb == name], dtype=np.int64)
        if len(idx) < k:
            raise ValueError(f"class {name!r} has {len(idx)} samples, fewer than k={k}")
        rng = np.random.default_rng([abs(int(seed)), 0xF05D, hash_name(name)])
        by_class[name] = rng.permutation(idx)

    folds = []
    for fold_id in range(k):
        train, val, test = [], [], []
        for name, perm in by_class.items():
            chunks = np.array_split(perm, k)
            test_c = chunks[fold_id]
            rest = np.concatenate([c for j, c in enumerate(chunks) if j != fold_id])
            n_val = int(round(0.2 * len(rest)))
            val_c, train_c = rest[:n_val], rest[n_val:]
            test.append(test_c)
            val.append(val_c)
            train.append(train_c)
        folds.append(FoldSplit(fold_id=fold_id,
                               train_idx=np.sort(np.concatenate(train)),
                               val_idx=np.sort(np.concatenate(val)),
                               test_idx=np.sort(np.concatenate(test))))
    return folds


def hash_name(name: str) -> int:
    return int.from_bytes(hashlib.sha256(name.encode()).digest()[:4], "little")


# -------------------------------------------------------------- augmentation

@dataclass(frozen=True)
class TrainItem:
    """One training sample: a manifest index plus an optional augmentation."""

    index: int
    spec: AugmentSpec | None = None


def balance_augment(manifest: DatasetManifest, train_idx, seed: int = 0,
                    base_factor: int = 7) -> list[TrainItem]:
    """Replicate each class so sizes balance: class i gets factor
    round(base_factor * n_majority / n_i), so the majority class is expanded
    exactly base_factor times. Originals are retained among the replicas;
    each extra replica carries a sampled rotation/translation spec."""
    train_idx = sorted(int(i) for i in train_idx)
    labels = [manifest.records[i].label for i in train_idx]
    counts: dict[str, int] = {}
    for lb in labels:
        counts[lb] = counts.get(lb, 0) + 1
    if not counts or min(counts.values()) == 0:
        raise ValueError("every class present must have at least one training sample")
    n_maj = max(counts.values())
    factors = {lb: int(math.floor(base_factor * n_maj / n + 0.5)) for lb, n in counts.items()}

    items = []
    for idx, lb in zip(train_idx, labels):
        items.append(TrainItem(index=idx))
        rng = np.random.default_rng([abs(int(seed)), 0xA9, idx])
        for r in range(factors[lb] - 1):
            items.append(TrainItem(index=idx, spec=AugmentSpec.sample(rng, seed=seed)))
    return items


# ------------------------------------------------------------- scheme config

@dataclass
class SchemeConfig:
    """What to train: plain or segmented inputs, which enhancement, which
    classifier family, at what input resolution."""

    scheme: str = "plain"
    preprocessing: str = "original"
    family: str = "fire"
    input_size: int = 64
    width: int = 16
    blocks: int = 3
    optimizer: str = "sgd"
    n_classes: int = 3
    seg_checkpoint: str | None = None
    train: TrainConfig = field(default_factory=lambda: TrainConfig(max_epochs=20))

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"scheme must be one of {SCHEMES}")
        if self.preprocessing not in PREPROCESSINGS:
            raise ValueError(f"preprocessing must be one of {PREPROCESSINGS}")

    @property
    def in_channels(self) -> int:
        return 3 if self.preprocessing == "3channel" else 1


def preprocess_channels(img: np.ndarray, preprocessing: str) -> np.ndarray:
    """Apply the scheme enhancement; returns (C, H, W) uint8."""
    if preprocessing == "original":
        return img[None]
    if preprocessing == "clahe":
        return clahe(img)[None]
    if preprocessing == "complement":
        return complement(img)[None]
    if preprocessing == "3channel":
        return compose_3channel(img)
    raise ValueError(f"unknown preprocessing {preprocessing!r}")


def prepare_input(img: np.ndarray, mask: np.ndarray | None, cfg: SchemeConfig) -> np.ndarray:
    """Enhance the full image, mask it for the segmented scheme, then resize
    to the network input size. Returns float32 (C, s, s) in [0, 1]."""
    chans = preprocess_channels(img, cfg.preprocessing)
    if cfg.scheme == "segmented":
        if mask is None:
            raise ValueError("segmented scheme requires a mask")
        chans = apply_mask(chans, mask)
    s = cfg.input_size
    if chans.shape[1:] != (s, s):
        chans = np.stack([resize_bilinear(ch, s, s) for ch in chans])
    return chans.astype(np.float32) / 255.0


def _augmented_pair(img, mask, spec: AugmentSpec | None):
    if spec is None:
        return img, mask
    img = augment(img, spec)
    if mask is not None:
        # warp the mask identically, then re-binarize the interpolated edges
        mask = np.where(augment(mask, spec) >= 128, 255, 0).astype(np.uint8)
    return img, mask


def _resolve_masks(manifest: DatasetManifest, indices, cfg: SchemeConfig) -> dict:
    """Masks for the segmented scheme: from manifest files when listed,
    otherwise predicted with the configured segmentation checkpoint."""
    masks: dict[int, np.ndarray] = {}
    if cfg.scheme != "segmented":
        return masks
    missing = [i for i in indices if manifest.records[i].mask_path is None]
    for i in indices:
        if manifest.records[i].mask_path is not None:
            masks[i] = read_image(manifest.mask_path(i))
    if missing:
        if cfg.seg_checkpoint is None:
            raise ValueError(
                f"segmented scheme: {len(missing)} record(s) lack masks and no "
                "segmentation checkpoint is configured")
        model, _ = load_checkpoint(cfg.seg_checkpoint)
        from . import engine

        for i in missing:
            img = read_image(manifest.image_path(i)).astype(np.float32) / 255.0
            with engine.no_grad():
                proba = model.forward(img[None, None], train=False).data[0]
            masks[i] = np.where(proba[1] >= 0.5, 255, 0).astype(np.uint8)
    return masks


def load_classification_arrays(manifest: DatasetManifest, items, cfg: SchemeConfig):
    """Materialize (X, y) for a list of TrainItems (or plain indices)."""
    items = [it if isinstance(it, TrainItem) else TrainItem(index=int(it)) for it in items]
    masks = _resolve_masks(manifest, sorted({it.index for it in items}), cfg)
    xs, ys = [], []
    for it in items:
        rec = manifest.records[it.index]
        img = read_image(manifest.image_path(it.index))
        mask = masks.get(it.index)
        img, mask = _augmented_pair(img, mask, it.spec)
        xs.append(prepare_input(img, mask, cfg))
        ys.append(CLASS_NAMES.index(rec.label))
    return np.stack(xs), np.array(ys, dtype=np.int64)


# ------------------------------------------------------------ training entry

def train_segmentation(manifest: DatasetManifest, unet_cfg=None, train_cfg: TrainConfig | None = None,
                       indices=None, val_indices=None) -> UNetSegmenter:
    """Train the U-Net on manifest records (which must all carry masks) with
    pixel-wise cross-entropy; 20% of the records validate when no explicit
    validation indices are given."""
    from .nets import UNetConfig

    unet_cfg = unet_cfg or UNetConfig()
    train_cfg = train_cfg or TrainConfig(max_epochs=50)
    indices = list(range(len(manifest))) if indices is None else [int(i) for i in indices]
    for i in indices + ([int(j) for j in val_indices] if val_indices is not None else []):
        if manifest.records[i].mask_path is None:
            raise ValueError(f"record {i} has no mask; segmentation training needs masks")

    def load(idx_list):
        X = np.stack([read_image(manifest.image_path(i)) for i in idx_list])
        M = np.stack([read_image(manifest.mask_path(i)) for i in idx_list])
        return X, M

    seg = UNetSegmenter(in_channels=unet_cfg.in_channels, base_channels=unet_cfg.base_channels,
                        depth=unet_cfg.depth, learning_rate=train_cfg.learning_rate,
                        adam_beta1=train_cfg.adam_betas[0], adam_beta2=train_cfg.adam_betas[1],
                        batch_size=train_cfg.batch_size, max_epochs=train_cfg.max_epochs,
                        lr_drop_factor=train_cfg.lr_drop_factor, lr_patience=train_cfg.lr_patience,
                        stop_patience=train_cfg.stop_patience, seed=train_cfg.seed)
    X, M = load(indices)
    if val_indices is not None:
        seg.fit(X, M, validation=load([int(i) for i in val_indices]))
    else:
        seg.fit(X, M)
    return seg


def _classifier_for(cfg: SchemeConfig, seed: int) -> CNNClassifier:
    t = cfg.train
    return CNNClassifier(family=cfg.family, in_channels=cfg.in_channels,
                         n_classes=cfg.n_classes, width=cfg.width, blocks=cfg.blocks,
                         optimizer=cfg.optimizer, learning_rate=t.learning_rate,
                         momentum=t.momentum_beta, adam_beta1=t.adam_betas[0],
                         adam_beta2=t.adam_betas[1], batch_size=t.batch_size,
                         max_epochs=t.max_epochs, lr_drop_factor=t.lr_drop_factor,
                         lr_patience=t.lr_patience, stop_patience=t.stop_patience, seed=seed)


def train_classifier(manifest: DatasetManifest, cfg: SchemeConfig,
                     train_items=None, val_idx=None, seed: int | None = None) -> CNNClassifier:
    """Train one classifier per the scheme config. When train_items is None,
    an 80/20 split of the whole manifest is used with balancing augmentation
    on the training part."""
    seed = cfg.train.seed if seed is None else seed
    if train_items is None or val_idx is None:
        rng = np.random.default_rng([abs(int(seed)), 0x5EED])
        order = rng.permutation(len(manifest))
        n_val = max(1, int(round(0.2 * len(manifest))))
        val_idx = np.sort(order[:n_val])
        train_items = balance_augment(manifest, order[n_val:], seed=seed)
    X, y = load_classification_arrays(manifest, train_items, cfg)
    Xv, yv = load_classification_arrays(manifest, val_idx, cfg)
    clf = _classifier_for(cfg, seed)
    clf.fit(X, y, validation=(Xv, yv))
    return clf


# ---------------------------------------------------------------- evaluation

@dataclass
class EvaluationResult:
    report: object
    confusion: ConfusionMatrix
    rocs: dict
    scores: np.ndarray
    labels: np.ndarray
    indices: np.ndarray


def evaluate_scores(scores: np.ndarray, labels: np.ndarray, indices: np.ndarray,
                     n_classes: int) -> EvaluationResult:
    cm = ConfusionMatrix(n_classes)
    cm.add_batch(labels, scores.argmax(axis=1))
    report = build_report(cm, CLASS_NAMES[:n_classes])
    rocs: dict[str, RocResult] = {
        CLASS_NAMES[i]: roc_curve(scores, labels, i) for i in range(n_classes)}
    rocs["micro"] = roc_micro_average(scores, labels)
    return EvaluationResult(report=report, confusion=cm, rocs=rocs, scores=scores,
                            labels=labels, indices=indices)


def evaluate_scheme(models, folds, manifest: DatasetManifest, cfg: SchemeConfig) -> EvaluationResult:
    """Accumulate every fold's test predictions into one confusion matrix and
    pool the scores for ROC curves. models[i] evaluates folds[i]."""
    if len(models) != len(folds):
        raise ValueError(f"{len(models)} checkpoints for {len(folds)} folds")
    all_scores, all_labels, all_idx = [], [], []
    for model, fold in zip(models, folds):
        X, y = load_classification_arrays(manifest, fold.test_idx, cfg)
        all_scores.append(model.predict_proba(X))
        all_labels.append(y)
        all_idx.append(np.asarray(fold.test_idx, dtype=np.int64))
    return evaluate_scores(np.concatenate(all_scores), np.concatenate(all_labels),
                            np.concatenate(all_idx), cfg.n_classes)


# ----------------------------------------------------------- cross-validation

def fold_seed(seed: int, fold_id: int) -> int:
    # distinct deterministic stream per fold, shared by serial and parallel runs
    return abs(int(seed)) * 1_000_003 + fold_id


def _run_fold(args):
    manifest_path, cfg, k, seed, fold_id, out_dir = args
    manifest = load_manifest(manifest_path)
    folds = make_folds(manifest, k=k, seed=seed)
    fold = folds[fold_id]
    items = balance_augment(manifest, fold.train_idx, seed=fold_seed(seed, fold_id))
    X, y = load_classification_arrays(manifest, items, cfg)
    Xv, yv = load_classification_arrays(manifest, fold.val_idx, cfg)
    clf = _classifier_for(cfg, seed=fold_seed(seed, fold_id))
    clf.fit(X, y, validation=(Xv, yv))
    Xt, yt = load_classification_arrays(manifest, fold.test_idx, cfg)
    scores = clf.predict_proba(Xt)
    ckpt_path = None
    if out_dir is not None:
        fold_dir = Path(out_dir) / f"fold{fold_id}"
        fold_dir.mkdir(parents=True, exist_ok=True)
        ckpt_path = str(fold_dir / "checkpoint.ckpt")
        save_checkpoint(clf.model_, ckpt_path,
                        meta={"epoch": clf.best_epoch_, "best_val_loss": clf.best_val_loss_,
                              "seed": fold_seed(seed, fold_id), "fold_id": fold_id,
                              "scheme": cfg.scheme, "preprocessing": cfg.preprocessing,
                              "family": cfg.family, "input_size": cfg.input_size})
        write_history_csv(clf.history_, fold_dir / "log.csv")
    return fold_id, clf.history_, scores, yt, np.asarray(fold.test_idx), ckpt_path


def run_crossval(manifest_path, cfg: SchemeConfig, k: int = 5, seed: int = 0,
                 out_dir=None, jobs: int = 1) -> EvaluationResult:
    """k-fold cross-validation of one scheme; writes per-fold checkpoints and
    logs plus the merged report files when out_dir is given. Folds may run in
    parallel (jobs > 1) with output identical to the serial run."""
    manifest = load_manifest(manifest_path)
    manifest.verify(require_masks=(cfg.scheme == "segmented" and cfg.seg_checkpoint is None))
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
    arg_list = [(str(manifest_path), cfg, k, seed, fold_id, str(out_dir) if out_dir else None)
                for fold_id in range(k)]
    if jobs > 1:
        with get_context("fork").Pool(min(jobs, k)) as pool:
            results = pool.map(_run_fold, arg_list)
    else:
        results = [_run_fold(a) for a in arg_list]
    results.sort(key=lambda r: r[0])
    scores = np.concatenate([r[2] for r in results])
    labels = np.concatenate([r[3] for r in results])
    indices = np.concatenate([r[4] for r in results])
    result = evaluate_scores(scores, labels, indices, cfg.n_classes)
    if out_dir is not None:
        write_evaluation(result, out_dir, cfg.n_classes)
    return result


def write_evaluation(result: EvaluationResult, out_dir, n_classes: int):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(result.report, out_dir / "metrics.csv")
    write_confusion_csv(result.confusion, out_dir / "confusion.csv",
                        class_names=CLASS_NAMES[:n_classes])
    for name, roc in result.rocs.items():
        write_roc_csv(roc, out_dir / f"roc_{name.lower()}.csv")
    with open(out_dir / "predictions.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["index", "label", "pred"] + [f"p_{c.lower()}" for c in CLASS_NAMES[:n_classes]])
        preds = result.scores.argmax(axis=1)
        for i in range(len(result.labels)):
            wr.writerow([int(result.indices[i]), int(result.labels[i]), int(preds[i])]
                        + [repr(float(v)) for v in result.scores[i]])


# -------------------------------------------------------------------- config

def write_history_csv(history, path):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["epoch", "train_loss", "val_loss", "lr", "action"])
        for row in history:
            wr.writerow([row["epoch"], repr(row["train_loss"]), repr(row["val_loss"]),
                         repr(row["lr"]), row["action"]])


def read_config_file(path) -> dict:
    """Flat key=value config; '#' starts a comment."""
    out = {}
    for ln, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{ln}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


_TRAIN_FIELDS = {
    "learning_rate": float, "momentum_beta": float, "adam_beta1": float, "adam_beta2": float,
    "batch_size": int, "max_epochs": int, "lr_drop_factor": float, "lr_patience": int,
    "stop_patience": int, "seed": int,
}
_SCHEME_FIELDS = {
    "scheme": str, "preprocessing": str, "family": str, "input_size": int, "width": int,
    "blocks": int, "optimizer": str, "n_classes": int, "seg_checkpoint": str,
}


def scheme_from_mapping(mapping: dict, base: SchemeConfig | None = None) -> SchemeConfig:
    """Build a SchemeConfig (including nested TrainConfig) from flat strings."""
    cfg = base or SchemeConfig()
    train_kwargs = {}
    scheme_kwargs = {}
    for key, raw in mapping.items():
        if key in _TRAIN_FIELDS:
            train_kwargs[key] = _TRAIN_FIELDS[key](raw)
        elif key in _SCHEME_FIELDS:
            scheme_kwargs[key] = _SCHEME_FIELDS[key](raw)
        else:
            raise ValueError(f"unknown config key {key!r}")
    if "adam_beta1" in train_kwargs or "adam_beta2" in train_kwargs:
        b1 = train_kwargs.pop("adam_beta1", cfg.train.adam_betas[0])
        b2 = train_kwargs.pop("adam_beta2", cfg.train.adam_betas[1])
        train_kwargs["adam_betas"] = (b1, b2)
    train = replace(cfg.train, **train_kwargs) if train_kwargs else cfg.train
    return replace(cfg, train=train, **scheme_kwargs)


def config_mapping(cfg: SchemeConfig) -> dict:
    t = cfg.train
    out = {
        "scheme": cfg.scheme, "preprocessing": cfg.preprocessing, "family": cfg.family,
        "input_size": cfg.input_size, "width": cfg.width, "blocks": cfg.blocks,
        "optimizer": cfg.optimizer, "n_classes": cfg.n_classes,
        "learning_rate": t.learning_rate, "momentum_beta": t.momentum_beta,
        "adam_beta1": t.adam_betas[0], "adam_beta2": t.adam_betas[1],
        "batch_size": t.batch_size, "max_epochs": t.max_epochs,
        "lr_drop_factor": t.lr_drop_factor, "lr_patience": t.lr_patience,
        "stop_patience": t.stop_patience, "seed": t.seed,
    }
    if cfg.seg_checkpoint:
        out["seg_checkpoint"] = cfg.seg_checkpoint
    return out


def write_config_file(cfg: SchemeConfig, path):
    lines = [f"{k}={v}" for k, v in config_mapping(cfg).items()]
    Path(path).write_text("\n".join(lines) + "\n")
