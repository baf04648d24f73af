"""Dataset indexing, preprocessing, augmentation and stratified folds.

A dataset is either a directory ``root/<class_name>/<image>`` or a CSV
manifest with a ``path,label[,fold]`` header (paths relative to the CSV).
Classes are indexed in lexicographic order and records are sorted by path.
"""

from __future__ import annotations

import csv
import hashlib
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from anca.errors import ConfigError, DataError
from anca.imageio import IMAGE_SUFFIXES, read_image
from anca.rng import Rng

log = logging.getLogger(__name__)

AUGMENT_MODES = ("rot90", "arbitrary", "none")
STD_FLOOR = 1e-6


@dataclass(frozen=True)
class Record:
    path: Path
    label: int
    fold: int | None = None


@dataclass
class DatasetIndex:
    records: list[Record]
    class_names: list[str]
    root: Path
    folds: np.ndarray | None = None
    mean: tuple[float, float, float] | None = None
    std: tuple[float, float, float] | None = None
    explicit_folds: bool = field(default=False)

    def __len__(self):
        return len(self.records)

    @property
    def labels(self) -> np.ndarray:
        return np.array([r.label for r in self.records], dtype=np.int64)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def relpath(self, i: int) -> str:
        p = self.records[i].path
        try:
            return p.relative_to(self.root).as_posix()
        except ValueError:
            return p.as_posix()

    def assign_folds(self, k: int, rng: Rng) -> np.ndarray:
        """Stratified assignment, unless the manifest fixed the folds already."""
        if self.explicit_folds:
            folds = np.array([r.fold for r in self.records], dtype=np.int64)
            if folds.max() >= k:
                raise DataError(f"manifest fold id {int(folds.max())} out of range for {k} folds")
        else:
            folds = stratified_folds(self.labels, k, rng)
        self.folds = folds
        return folds

    def split(self, fold: int) -> tuple[np.ndarray, np.ndarray]:
        """``(train indices, held-out indices)`` for one fold."""
        if self.folds is None:
            raise ConfigError("folds have not been assigned")
        held = self.folds == fold
        if not held.any():
            raise ConfigError(f"fold {fold} is empty")
        return np.flatnonzero(~held), np.flatnonzero(held)


def _check_readable(path: Path) -> None:
    if not path.is_file():
        raise DataError(f"missing image file: {path}")
    if not os.access(path, os.R_OK):
        raise DataError(f"unreadable image file: {path}")


def load_manifest(source) -> DatasetIndex:
    """Index a class-per-directory tree or a CSV manifest."""
    source = Path(source)
    if source.is_dir():
        return _load_directory(source)
    if source.is_file():
        return _load_csv(source)
    raise DataError(f"dataset not found: {source}")


def _load_directory(root: Path) -> DatasetIndex:
    class_names, entries = [], []
    for d in sorted(p for p in root.iterdir() if p.is_dir()):
        files = sorted(f for f in d.iterdir() if f.is_file() and f.suffix.lower() in IMAGE_SUFFIXES)
        if not files:
            log.warning("class directory %s has no images; skipping it", d)
            continue
        class_names.append(d.name)
        entries.extend((f, d.name) for f in files)
    if not entries:
        raise DataError(f"no images found under {root}")
    lookup = {name: i for i, name in enumerate(class_names)}
    records = []
    for path, name in sorted(entries, key=lambda e: e[0].relative_to(root).as_posix()):
        _check_readable(path)
        records.append(Record(path, lookup[name]))
    return DatasetIndex(records, class_names, root)


def _load_csv(manifest: Path) -> DatasetIndex:
    root = manifest.parent
    with manifest.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = [h.strip() for h in (reader.fieldnames or [])]
        if header[:2] != ["path", "label"] or len(header) > 3 or (len(header) == 3 and header[2] != "fold"):
            raise DataError(f"{manifest}: header must be path,label[,fold], got {','.join(header)}")
        rows = [{k.strip(): (v or "").strip() for k, v in row.items()} for row in reader]
    if not rows:
        raise DataError(f"{manifest}: no records")
    with_folds = len(header) == 3
    class_names = sorted({r["label"] for r in rows})
    lookup = {name: i for i, name in enumerate(class_names)}
    seen, records = set(), []
    for r in rows:
        path = (root / r["path"]).resolve() if not Path(r["path"]).is_absolute() else Path(r["path"])
        if path in seen:
            raise DataError(f"{manifest}: duplicate path {r['path']}")
        seen.add(path)
        _check_readable(path)
        fold = None
        if with_folds:
            try:
                fold = int(r["fold"])
            except ValueError:
                raise DataError(f"{manifest}: bad fold {r['fold']!r} for {r['path']}") from None
            if fold < 0:
                raise DataError(f"{manifest}: negative fold for {r['path']}")
        records.append(Record(path, lookup[r["label"]], fold))
    records.sort(key=lambda rec: rec.path.as_posix())
    return DatasetIndex(records, class_names, root.resolve(), explicit_folds=with_folds)


# ---------------------------------------------------------------------------
# preprocessing


def _resize_axis(img: np.ndarray, out: int, axis: int) -> np.ndarray:
    n = img.shape[axis]
    if n == out:
        return img
    src = (np.arange(out) + 0.5) * (n / out) - 0.5
    src = np.clip(src, 0.0, n - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n - 1)
    w = src - i0
    shape = [1] * img.ndim
    shape[axis] = out
    w = w.reshape(shape)
    return np.take(img, i0, axis=axis) * (1.0 - w) + np.take(img, i1, axis=axis) * w


def resize_bilinear(img: np.ndarray, size: int) -> np.ndarray:
    """Half-pixel-centre bilinear resize to ``size x size`` with edge clamping."""
    img = np.asarray(img, dtype=np.float64)
    return _resize_axis(_resize_axis(img, size, 0), size, 1)


def safe_std(std: Sequence[float]) -> tuple[float, float, float]:
    out = []
    for c, s in enumerate(std):
        if s < STD_FLOOR:
            log.warning("std of channel %d is %.3g; using 1 instead", c, s)
            s = 1.0
        out.append(float(s))
    return tuple(out)


def preprocess(raw: np.ndarray, size: int, mean: Sequence[float], std: Sequence[float]) -> np.ndarray:
    """8-bit RGB -> resized, ``/255``, per-channel ``(x - mean) / std``, float32."""
    raw = np.asarray(raw)
    if raw.ndim != 3 or raw.shape[2] != 3:
        raise DataError(f"expected an (H, W, 3) RGB image, got {raw.shape}")
    return normalize(resize_bilinear(raw, size) / 255.0, mean, std)


def normalize(x: np.ndarray, mean: Sequence[float], std: Sequence[float]) -> np.ndarray:
    """Per-channel ``(x - mean) / std`` of ``[0, 1]`` pixels, as float32."""
    mean = np.asarray(mean, dtype=np.float64)
    std = np.asarray(safe_std(std), dtype=np.float64)
    return ((np.asarray(x, dtype=np.float64) - mean) / std).astype(np.float32)


def denormalize(x: np.ndarray, mean: Sequence[float], std: Sequence[float]) -> np.ndarray:
    """Inverse of the normalization, as clamped 8-bit RGB."""
    raw = (np.asarray(x, dtype=np.float64) * np.asarray(safe_std(std)) + np.asarray(mean)) * 255.0
    return np.clip(np.floor(raw + 0.5), 0, 255).astype(np.uint8)


def compute_mean_std(
    index: DatasetIndex,
    indices: Sequence[int],
    size: int,
    loader: Callable[[int], np.ndarray] | None = None,
) -> tuple[tuple[float, ...], tuple[float, ...]]:
    """Per-channel mean and population std of resized ``raw/255`` pixels over a split.

    Images are folded in one at a time (Chan's pairwise update), so the
    whole split never sits in memory. ``loader(i)`` may supply already
    resized ``[0, 1]`` images.
    """
    if len(indices) == 0:
        raise DataError("cannot compute statistics of an empty split")
    count, mean, m2 = 0, np.zeros(3), np.zeros(3)
    for i in indices:
        x = loader(i) if loader else resize_bilinear(read_image(index.records[i].path), size) / 255.0
        px = np.asarray(x, dtype=np.float64).reshape(-1, 3)
        nb = px.shape[0]
        mb = px.mean(axis=0)
        m2b = ((px - mb) ** 2).sum(axis=0)
        delta = mb - mean
        total = count + nb
        mean = mean + delta * (nb / total)
        m2 = m2 + m2b + delta**2 * (count * nb / total)
        count = total
    std = np.sqrt(m2 / count)
    as32 = lambda v: tuple(float(np.float32(x)) for x in v)  # noqa: E731
    return as32(mean), as32(std)


def split_hash(index: DatasetIndex, indices: Sequence[int]) -> str:
    h = hashlib.blake2b(digest_size=8)
    for p in sorted(index.relpath(int(i)) for i in indices):
        h.update(p.encode() + b"\n")
    return h.hexdigest()


def write_stats(path, mean, std, split: str | None = None) -> None:
    lines = ["mean " + " ".join(f"{v:.9g}" for v in mean), "std " + " ".join(f"{v:.9g}" for v in std)]
    if split:
        lines.append(f"split {split}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_stats(path) -> tuple[tuple[float, ...], tuple[float, ...], str | None]:
    values, split = {}, None
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] in ("mean", "std") and len(parts) == 4:
            values[parts[0]] = tuple(float(v) for v in parts[1:])
        elif parts[0] == "split" and len(parts) == 2:
            split = parts[1]
        else:
            raise DataError(f"{path}: bad stats line {line!r}")
    if set(values) != {"mean", "std"}:
        raise DataError(f"{path}: needs both mean and std lines")
    return values["mean"], values["std"], split


# ---------------------------------------------------------------------------
# augmentation


def rotate_bilinear(image: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate ``(H, W, C)`` about its centre, bilinear, zero outside the source.

    Positive angles turn the same way as ``np.rot90``.
    """
    H, W = image.shape[:2]
    cy, cx = (H - 1) / 2.0, (W - 1) / 2.0
    a = -math.radians(degrees)
    yy, xx = np.meshgrid(np.arange(H) - cy, np.arange(W) - cx, indexing="ij")
    # inverse map: output pixel -> source coordinate
    sy = math.cos(a) * yy - math.sin(a) * xx + cy
    sx = math.sin(a) * yy + math.cos(a) * xx + cx
    y0, x0 = np.floor(sy).astype(np.int64), np.floor(sx).astype(np.int64)
    wy, wx = (sy - y0)[..., None], (sx - x0)[..., None]
    src = np.asarray(image, dtype=np.float64)
    out = np.zeros(src.shape)
    for dy, fy in ((0, 1 - wy), (1, wy)):
        for dx, fx in ((0, 1 - wx), (1, wx)):
            yi, xi = y0 + dy, x0 + dx
            ok = (yi >= 0) & (yi < H) & (xi >= 0) & (xi < W)
            vals = np.where(ok[..., None], src[np.clip(yi, 0, H - 1), np.clip(xi, 0, W - 1)], 0.0)
            out += fy * fx * vals
    return out.astype(image.dtype)


def augment_params(rng: Rng, mode: str = "rot90") -> tuple[float, bool, bool]:
    """Draw ``(rotation degrees, horizontal flip, vertical flip)``."""
    if mode not in AUGMENT_MODES:
        raise ConfigError(f"augmentation must be one of {AUGMENT_MODES}, got {mode!r}")
    if mode == "none":
        return 0.0, False, False
    g = rng.generator()
    angle = 90.0 * int(g.integers(4)) if mode == "rot90" else float(g.uniform(0.0, 360.0))
    return angle, bool(g.random() < 0.5), bool(g.random() < 0.5)


def apply_augment(image: np.ndarray, angle: float, hflip: bool, vflip: bool) -> np.ndarray:
    if angle % 90 == 0:
        out = np.rot90(image, k=int(angle // 90) % 4, axes=(0, 1))
    else:
        out = rotate_bilinear(image, angle)
    if hflip:
        out = out[:, ::-1]
    if vflip:
        out = out[::-1]
    return np.ascontiguousarray(out)


def augment(image: np.ndarray, rng: Rng, mode: str = "rot90") -> np.ndarray:
    """Random rotation (90 degree multiples by default) plus independent flips."""
    return apply_augment(image, *augment_params(rng, mode))


# ---------------------------------------------------------------------------
# folds


def stratified_folds(labels: Sequence[int], k: int, rng: Rng) -> np.ndarray:
    """Fold id per sample.

    Each class is shuffled and dealt round-robin; the deal continues where
    the previous class stopped so total fold sizes stay balanced too.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if k < 2:
        raise ConfigError(f"need at least 2 folds, got {k}")
    if k > labels.size:
        raise ConfigError(f"{k} folds for only {labels.size} samples")
    folds = np.empty(labels.size, dtype=np.int64)
    offset = 0
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.derive("fold-class", int(c)).permutation(idx.size)]
        folds[idx] = (offset + np.arange(idx.size)) % k
        offset = (offset + idx.size) % k
    return folds
