"""Training, evaluation, cross-validation and ablation runs.

Every random draw is keyed by a stream id so results are reproducible
from ``(config, seed, dataset)`` alone:

    init        ("init", tensor name)
    folds       ("folds", "fold-class", class)
    shuffle     ("shuffle", epoch)
    augment     ("augment", epoch, sample)
    fire masks  ("delta", epoch, batch, sample, step)
    evaluation  eval_seed: ("eval-delta", 0, 0, sample, step)

``sample`` is the record's position in the path-sorted dataset index.
"""

from __future__ import annotations

import csv
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from anca.checkpoint import METRIC_COLUMNS, Checkpoint
from anca.classifier import Metrics, focal_loss, inverse_frequency_weights, metrics, predict
from anca.config import TrainConfig
from anca.data import (
    DatasetIndex,
    augment,
    compute_mean_std,
    load_manifest,
    normalize,
    resize_bilinear,
    split_hash,
)
from anca.errors import CheckpointError, ConfigError, DataError, DivergenceError
from anca.imageio import read_image
from anca.model import count_params, forward
from anca.nca import step_masks
from anca.optim import AdamState, adam_step, init_params
from anca.rng import Rng
from anca.tensor import Tape, Tensor

log = logging.getLogger(__name__)

CSV_COLUMNS = METRIC_COLUMNS + ("wall_seconds",)
ABLATION_VARIANTS = (
    ("top5", "attention", 0.05),
    ("top10", "attention", 0.10),
    ("top20", "attention", 0.20),
    ("top50", "attention", 0.50),
    ("conv", "conv_attention", None),  # None: keep the config's top fraction
)


def load_dataset(data, config: TrainConfig) -> DatasetIndex:
    index = data if isinstance(data, DatasetIndex) else load_manifest(data)
    if index.folds is None:
        index.assign_folds(config.folds, Rng(config.seed).derive("folds"))
    return index


@dataclass
class FoldData:
    index: DatasetIndex
    fold: int
    train_idx: np.ndarray
    val_idx: np.ndarray
    mean: tuple[float, ...]
    std: tuple[float, ...]
    split_hash: str
    images: np.ndarray  # normalized, one per record

    @property
    def labels(self) -> np.ndarray:
        return self.index.labels


def prepare_fold(index: DatasetIndex, config: TrainConfig, fold: int, stats=None) -> FoldData:
    """Load every image once, compute training-split statistics, normalize."""
    if not 0 <= fold < config.folds:
        raise ConfigError(f"fold {fold} out of range for {config.folds} folds")
    train_idx, val_idx = index.split(fold)
    size = config.input_size
    raw = np.stack([resize_bilinear(read_image(r.path), size) / 255.0 for r in index.records])
    if stats is None:
        mean, std = compute_mean_std(index, train_idx, size, loader=lambda i: raw[i])
    else:
        mean, std = stats
    index.mean, index.std = mean, std
    return FoldData(index, fold, train_idx, val_idx, mean, std, split_hash(index, train_idx), normalize(raw, mean, std))


def batch_masks(base: Rng, sample_ids, steps: int, size: int, fire_rate: float) -> np.ndarray:
    """``(T, B, H, W)`` fire masks, one stream per sample."""
    out = np.empty((steps, len(sample_ids), size, size), dtype=np.float32)
    for b, sid in enumerate(sample_ids):
        out[:, b] = step_masks(base.derive(int(sid)), steps, (size, size), fire_rate)
    return out


def _chunks(ids: np.ndarray, size: int):
    for start in range(0, len(ids), size):
        yield ids[start:start + size]


def predict_probs(params, fd: FoldData, ids: np.ndarray, config: TrainConfig, classes: int) -> np.ndarray:
    """Class probabilities without augmentation, fire masks from the evaluation seed."""
    arch, rc = config.architecture(classes), config.rollout()
    consts = {k: Tensor(v) for k, v in params.items()}
    base = Rng(config.eval_seed).derive("eval-delta", 0, 0)
    out = [np.zeros((0, classes), dtype=np.float32)]
    for chunk in _chunks(np.asarray(ids), config.batch_size):
        masks = batch_masks(base, chunk, config.steps, config.input_size, config.fire_rate)
        out.append(forward(consts, fd.images[chunk], arch, rc, masks).data)
    return np.concatenate(out)


@dataclass
class EvalResult:
    loss: float
    metrics: Metrics
    ids: np.ndarray
    preds: np.ndarray
    probs: np.ndarray

    @property
    def accuracy(self) -> float:
        return self.metrics.accuracy

    @property
    def balanced_accuracy(self) -> float:
        return self.metrics.balanced_accuracy


def _evaluate_ids(params, fd, ids, config, classes, loss_cfg) -> EvalResult:
    probs = predict_probs(params, fd, ids, config, classes)
    labels = fd.labels[ids]
    loss = float(focal_loss(probs.astype(np.float64), labels, loss_cfg).data)
    preds = predict(probs)
    return EvalResult(loss, metrics(preds, labels, classes), np.asarray(ids), preds, probs)


def _row(epoch: int, split: str, loss: float, m: Metrics, lr: float) -> dict:
    return {
        "epoch": epoch,
        "split": split,
        "loss": float(loss),
        "accuracy": float(m.accuracy),
        "balanced_accuracy": float(m.balanced_accuracy),
        "lr": float(lr),
    }


def _param_norms(params) -> str:
    return ", ".join(f"{k}={float(np.linalg.norm(v)):.4g}" for k, v in params.items())


def _write_metrics_csv(path: Path, rows: list[dict], walls: list) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for r, wall in zip(rows, walls):
            w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in METRIC_COLUMNS] + [
                "" if wall is None else f"{wall:.3f}"
            ])


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    rows: list[dict]
    val: EvalResult
    val_idx: np.ndarray
    train_idx: np.ndarray
    checkpoints: list[Path] = field(default_factory=list)


_RESUMABLE = {"epochs", "checkpoint_interval"}


def train(
    config: TrainConfig,
    data,
    fold: int = 0,
    out_dir=None,
    resume: Checkpoint | None = None,
) -> TrainResult:
    """Train one model with ``fold`` held out.

    Epoch 0 is an evaluation of the initial parameters. With ``out_dir``,
    writes ``metrics.csv``, ``final.anca``, ``confusion.csv`` and a
    checkpoint every ``checkpoint_interval`` epochs. ``resume`` continues
    from a checkpoint written by an identically configured run.
    """
    index = load_dataset(data, config)
    classes = index.num_classes
    arch = config.architecture(classes)
    rc = config.rollout()
    if resume is not None:
        for name in TrainConfig.__dataclass_fields__:
            if name not in _RESUMABLE and getattr(resume.config, name) != getattr(config, name):
                raise CheckpointError(f"cannot resume: checkpoint has {name}={getattr(resume.config, name)!r}")
        if resume.fold != fold or resume.num_classes != classes:
            raise CheckpointError("cannot resume: fold or class count differs from the checkpoint")
    fd = prepare_fold(index, config, fold)
    if resume is not None and resume.split_hash != fd.split_hash:
        raise CheckpointError("cannot resume: training split differs from the checkpoint")
    labels = fd.labels
    weights = inverse_frequency_weights(labels[fd.train_idx], classes) if config.class_weights else None
    loss_cfg = config.loss(weights)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    t0 = time.perf_counter()
    if resume is None:
        params = init_params(arch, Rng(config.seed))
        adam = AdamState(config.lr0, config.beta1, config.beta2, config.adam_eps, config.decay)
        val = _evaluate_ids(params, fd, fd.val_idx, config, classes, loss_cfg)
        rows = [_row(0, "val", val.loss, val.metrics, adam.lr)]
        walls = [time.perf_counter() - t0]
        start = 1
    else:
        params = resume.params.copy()
        adam = AdamState(config.lr0, config.beta1, config.beta2, config.adam_eps, config.decay, t=resume.step)
        if resume.adam is not None:
            adam.m = {k: v.copy() for k, v in resume.adam.m.items()}
            adam.u = {k: v.copy() for k, v in resume.adam.u.items()}
        rows = list(resume.metrics)
        walls = [None] * len(rows)
        start = resume.epoch + 1
        val = None

    def snapshot(epoch: int) -> Checkpoint:
        return Checkpoint(
            config=config,
            params=params.copy(),
            class_names=list(index.class_names),
            mean=fd.mean,
            std=fd.std,
            fold=fold,
            split_hash=fd.split_hash,
            step=adam.t,
            epoch=epoch,
            adam=AdamState(adam.lr0, adam.beta1, adam.beta2, adam.eps, adam.decay, adam.t,
                           {k: v.copy() for k, v in adam.m.items()}, {k: v.copy() for k, v in adam.u.items()}),
            metrics=[dict(r) for r in rows],
        )

    saved = []
    seed = Rng(config.seed)
    for epoch in range(start, config.epochs + 1):
        order = fd.train_idx[seed.derive("shuffle", epoch).permutation(len(fd.train_idx))]
        total_loss, preds, seen = 0.0, [], []
        for b, chunk in enumerate(_chunks(order, config.batch_size)):
            imgs = np.stack([augment(fd.images[i], seed.derive("augment", epoch, int(i)), config.augmentation)
                             for i in chunk])
            masks = batch_masks(seed.derive("delta", epoch, b), chunk, config.steps, config.input_size,
                                config.fire_rate)
            tape = Tape()
            watched = {k: tape.watch(v) for k, v in params.items()}
            probs = forward(watched, imgs, arch, rc, masks)
            loss = focal_loss(probs, labels[chunk], loss_cfg)
            value = float(loss.data)
            if not np.isfinite(value):
                raise DivergenceError(f"non-finite loss {value} at epoch {epoch} batch {b}; "
                                      f"parameter norms: {_param_norms(params)}")
            grads = tape.gradient(loss, watched)
            del tape, watched
            adam_step(params, grads, adam)
            total_loss += value * len(chunk)
            preds.append(predict(probs.data))
            seen.append(chunk)
        seen = np.concatenate(seen)
        train_m = metrics(np.concatenate(preds), labels[seen], classes)
        rows.append(_row(epoch, "train", total_loss / len(seen), train_m, adam.lr))
        val = _evaluate_ids(params, fd, fd.val_idx, config, classes, loss_cfg)
        rows.append(_row(epoch, "val", val.loss, val.metrics, adam.lr))
        wall = time.perf_counter() - t0
        walls += [wall, wall]
        log.info("fold %d epoch %d: train loss %.4f acc %.3f | val loss %.4f acc %.3f",
                 fold, epoch, rows[-2]["loss"], train_m.accuracy, val.loss, val.accuracy)
        if out is not None:
            _write_metrics_csv(out / "metrics.csv", rows, walls)
            if config.checkpoint_interval and epoch % config.checkpoint_interval == 0:
                saved.append(snapshot(epoch).save(out / f"checkpoint_e{epoch:03d}.anca"))

    if val is None:  # resumed at or past the final epoch
        val = _evaluate_ids(params, fd, fd.val_idx, config, classes, loss_cfg)
    final = snapshot(max(start - 1, config.epochs))
    if out is not None:
        _write_metrics_csv(out / "metrics.csv", rows, walls)
        saved.append(final.save(out / "final.anca"))
        (out / "confusion.csv").write_text(val.metrics.confusion_csv(index.class_names), encoding="utf-8")
    return TrainResult(final, rows, val, fd.val_idx, fd.train_idx, saved)


def evaluate(checkpoint, data, split: str = "val", out_dir=None) -> EvalResult:
    """Score a checkpoint on ``val`` (its held-out fold), ``train`` or ``all``."""
    ckpt = checkpoint if isinstance(checkpoint, Checkpoint) else Checkpoint.load(checkpoint)
    config = ckpt.config
    index = load_dataset(data, config)
    if index.num_classes != ckpt.num_classes:
        raise DataError(f"dataset has {index.num_classes} classes, checkpoint expects {ckpt.num_classes}")
    fd = prepare_fold(index, config, ckpt.fold, stats=(ckpt.mean, ckpt.std))
    if fd.split_hash != ckpt.split_hash:
        log.warning("training split differs from the one the checkpoint was trained on")
    ids = {"val": fd.val_idx, "train": fd.train_idx, "all": np.arange(len(index))}.get(split)
    if ids is None:
        raise ConfigError(f"split must be val, train or all, got {split!r}")
    weights = inverse_frequency_weights(fd.labels[fd.train_idx], index.num_classes) if config.class_weights else None
    result = _evaluate_ids(ckpt.params, fd, ids, config, index.num_classes, config.loss(weights))
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"confusion_{split}.csv").write_text(result.metrics.confusion_csv(index.class_names), encoding="utf-8")
    return result


# ---------------------------------------------------------------------------
# cross-validation and ablation


@dataclass
class FoldSummary:
    fold: int
    accuracy: float
    balanced_accuracy: float
    val_idx: np.ndarray


@dataclass
class CVResult:
    folds: list[FoldSummary]
    params: int

    @property
    def accuracies(self) -> np.ndarray:
        return np.array([f.accuracy for f in self.folds])

    @property
    def balanced_accuracies(self) -> np.ndarray:
        return np.array([f.balanced_accuracy for f in self.folds])

    @property
    def mean(self) -> float:
        return float(self.accuracies.mean())

    @property
    def std(self) -> float:
        return float(self.accuracies.std())  # population std

    def summary(self, balanced: bool = False) -> str:
        """``m±s`` in percent with one decimal."""
        v = self.balanced_accuracies if balanced else self.accuracies
        return f"{100 * v.mean():.1f}±{100 * v.std():.1f}"

    def to_csv(self) -> str:
        lines = ["fold,accuracy,balanced_accuracy"]
        lines += [f"{f.fold},{f.accuracy!r},{f.balanced_accuracy!r}" for f in self.folds]
        b = self.balanced_accuracies
        lines.append(f"mean,{self.mean!r},{float(b.mean())!r}")
        lines.append(f"std,{self.std!r},{float(b.std())!r}")
        lines.append(f"summary,{self.summary()},{self.summary(balanced=True)}")
        return "\n".join(lines) + "\n"


def _cv_fold(config: TrainConfig, data, fold: int, out_dir) -> FoldSummary:
    res = train(config, data, fold, out_dir)
    return FoldSummary(fold, res.val.accuracy, res.val.balanced_accuracy, res.val_idx)


def run_cv(config: TrainConfig, data, out_dir=None, jobs: int = 1) -> CVResult:
    """Train ``config.folds`` models, each with one fold held out."""
    if config.folds < 2:
        raise ConfigError("cross-validation needs at least 2 folds")
    index = load_dataset(data, config)
    out = Path(out_dir) if out_dir is not None else None
    dirs = [out / f"fold_{i}" if out is not None else None for i in range(config.folds)]
    if jobs > 1 and not isinstance(data, DatasetIndex):
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            folds = list(pool.map(_cv_fold, [config] * config.folds, [data] * config.folds,
                                  range(config.folds), dirs))
    else:
        folds = [_cv_fold(config, index, i, dirs[i]) for i in range(config.folds)]
    result = CVResult(folds, count_params(config.architecture(index.num_classes)))
    if out is not None:
        (out / "cv_summary.csv").write_text(result.to_csv(), encoding="utf-8")
    return result


@dataclass
class AblationRow:
    variant: str
    pool_mode: str
    top_fraction: float
    params: int
    cv: CVResult

    def cells(self) -> list[str]:
        acc = self.cv.accuracies
        return [
            self.variant,
            self.pool_mode,
            repr(self.top_fraction),
            str(self.params),
            ";".join(f"{a:.4f}" for a in acc),
            repr(self.cv.mean),
            repr(self.cv.std),
            self.cv.summary(),
        ]


ABLATION_COLUMNS = ("variant", "pool_mode", "top_fraction", "params", "fold_accuracies", "mean", "std", "summary")


def run_ablation(config: TrainConfig, data, out_dir=None, include_full: bool = False, jobs: int = 1) -> list[AblationRow]:
    """Cross-validate each top-fraction variant and the conv-generated attention map.

    ``include_full`` adds a q = 1 debug row (gated spatial mean).
    """
    variants = list(ABLATION_VARIANTS)
    if include_full:
        variants.append(("top100", "attention", 1.0))
    index = load_dataset(data, config)
    out = Path(out_dir) if out_dir is not None else None
    rows = []
    for name, mode, q in variants:
        cfg = config.replace(pool_mode=mode, top_fraction=config.top_fraction if q is None else q)
        cv = run_cv(cfg, index if jobs == 1 else data, out / name if out is not None else None, jobs)
        rows.append(AblationRow(name, mode, cfg.top_fraction, cv.params, cv))
        log.info("ablation %s: %s", name, cv.summary())
    if out is not None:
        with (out / "ablation.csv").open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(ABLATION_COLUMNS)
            w.writerows(r.cells() for r in rows)
    return rows
