"""Classification head, focal loss and evaluation metrics."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, NamedTuple, Sequence

import numpy as np

from anca.errors import ConfigError
from anca.tensor import Tensor, _emit, as_tensor, dense, mean_all, relu, softmax, sum_all

P_FLOOR = 1e-12


class HeadParams(NamedTuple):
    w1: Tensor  # (h, n)
    b1: Tensor  # (h,)
    w2: Tensor  # (C, h)
    b2: Tensor  # (C,)

    @classmethod
    def from_mapping(cls, params: Mapping[str, Tensor], prefix: str = "head.") -> HeadParams:
        return cls(*(params[prefix + name] for name in cls._fields))


def head_param_shapes(n: int, h: int, classes: int) -> dict[str, tuple[int, ...]]:
    return {"w1": (h, n), "b1": (h,), "w2": (classes, h), "b2": (classes,)}


def head_forward(v, params: HeadParams) -> Tensor:
    """Class probabilities ``softmax(W2 relu(W1 v + b1) + b2)``."""
    return softmax(dense(relu(dense(v, params.w1, params.b1)), params.w2, params.b2))


@dataclass(frozen=True)
class LossConfig:
    gamma: float = 2.0
    class_weights: tuple[float, ...] | None = None
    reduction: str = "mean"

    def __post_init__(self):
        if not np.isfinite(self.gamma) or self.gamma < 0:
            raise ConfigError(f"gamma must be finite and >= 0, got {self.gamma}")
        if self.reduction not in ("mean", "sum"):
            raise ConfigError(f"reduction must be 'mean' or 'sum', got {self.reduction!r}")
        if self.class_weights is not None and any(w < 0 for w in self.class_weights):
            raise ConfigError("class weights must be nonnegative")


def focal_loss(probs, labels, cfg: LossConfig = LossConfig()) -> Tensor:
    """``-alpha_y (1 - p_y)^gamma log p_y``, reduced over the batch.

    ``probs`` is ``(C,)`` or ``(B, C)``; ``labels`` an int or a length-B
    sequence. ``p_y`` is floored at 1e-12 before the log.
    """
    probs = as_tensor(probs)
    single = probs.data.ndim == 1
    P = probs.data.reshape(1, -1) if single else probs.data
    C = P.shape[-1]
    y = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if y.shape != (P.shape[0],) or (y < 0).any() or (y >= C).any():
        raise ConfigError(f"labels {y.tolist()} invalid for probabilities of shape {probs.shape}")
    if cfg.class_weights is not None and len(cfg.class_weights) != C:
        raise ConfigError(f"{len(cfg.class_weights)} class weights for {C} classes")
    alpha = np.ones(C) if cfg.class_weights is None else np.asarray(cfg.class_weights, dtype=np.float64)

    rows = np.arange(len(y))
    p = P[rows, y].astype(np.float64)
    pc = np.maximum(p, P_FLOOR)
    q = 1.0 - p
    gamma = cfg.gamma
    a = alpha[y]
    loss = -a * q**gamma * np.log(pc)

    def backward(g):
        g = np.broadcast_to(g, loss.shape)
        dlog = np.where(p >= P_FLOOR, 1.0 / pc, 0.0)
        if gamma == 0:
            dmod = 0.0
        else:
            dmod = np.where(q > 0, gamma * q ** (gamma - 1), 0.0) * np.log(pc)
        dp = a * (dmod - q**gamma * dlog)
        gP = np.zeros(P.shape)
        gP[rows, y] = g * dp
        return (gP.reshape(probs.shape),)

    per_sample = _emit(loss.astype(probs.dtype), (probs,), backward)
    if single:
        return per_sample
    return mean_all(per_sample) if cfg.reduction == "mean" else sum_all(per_sample)


def inverse_frequency_weights(labels: Sequence[int], classes: int) -> tuple[float, ...]:
    """``N / (C * n_c)``; classes without samples get weight 0."""
    counts = np.bincount(np.asarray(labels, dtype=np.int64), minlength=classes).astype(np.float64)
    total = counts.sum()
    with np.errstate(divide="ignore"):
        w = np.where(counts > 0, total / (classes * counts), 0.0)
    return tuple(float(x) for x in w)


def predict(probs: np.ndarray) -> np.ndarray:
    """Argmax over the last axis; ties go to the lower class index."""
    return np.argmax(np.asarray(probs), axis=-1)


@dataclass
class Metrics:
    accuracy: float
    balanced_accuracy: float
    per_class_recall: list[float | None]
    confusion: np.ndarray  # confusion[label, pred]

    def confusion_csv(self, class_names: Sequence[str] | None = None) -> str:
        C = self.confusion.shape[0]
        names = list(class_names) if class_names is not None else [str(i) for i in range(C)]
        lines = ["label\\pred," + ",".join(names)]
        for i, name in enumerate(names):
            lines.append(name + "," + ",".join(str(int(c)) for c in self.confusion[i]))
        return "\n".join(lines) + "\n"


def metrics(preds: Sequence[int], labels: Sequence[int], classes: int) -> Metrics:
    preds = np.asarray(preds, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if preds.shape != labels.shape:
        raise ConfigError(f"{preds.size} predictions for {labels.size} labels")
    if labels.size == 0:
        raise ConfigError("cannot compute metrics on an empty set")
    confusion = np.zeros((classes, classes), dtype=np.int64)
    np.add.at(confusion, (labels, preds), 1)
    support = confusion.sum(axis=1)
    recall = [float(confusion[c, c] / support[c]) if support[c] else None for c in range(classes)]
    present = [r for r in recall if r is not None]
    return Metrics(
        accuracy=float((preds == labels).mean()),
        balanced_accuracy=float(np.mean(present)),
        per_class_recall=recall,
        confusion=confusion,
    )
