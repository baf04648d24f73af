"""Tape gradients versus central finite differences."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from anca.errors import ContractError
from anca.rng import Rng
from anca.tensor import Tape, Tensor

LossFn = Callable[[dict[str, Tensor]], Tensor]


@dataclass
class GradCheckResult:
    max_rel_error: float
    checked: int
    skipped: int
    per_tensor: dict[str, float] = field(default_factory=dict)
    coverage: dict[str, int] = field(default_factory=dict)  # checked coordinates per tensor
    worst: tuple | None = None  # (name, flat index, analytic, numeric)

    def __float__(self):
        return self.max_rel_error


def relative_error(a: float, g: float) -> float:
    return abs(a - g) / max(abs(a), abs(g), 1e-8)


def _evaluate(loss_fn: LossFn, params: Mapping[str, np.ndarray]):
    tape = Tape(track_branches=True)
    watched = {k: tape.watch(v) for k, v in params.items()}
    out = loss_fn(watched)
    if out.data.size != 1:
        raise ContractError(f"loss_fn must return a scalar, got shape {out.shape}")
    return float(out.data.reshape(())), tape.branch_signature(), tape, watched, out


def grad_check(
    loss_fn: LossFn,
    params: Mapping[str, np.ndarray],
    rng: Rng,
    eps: float = 1e-3,
    n_coords: int = 200,
    dtype=np.float64,
    skip_unstable: bool = True,
    max_attempts: int | None = None,
) -> GradCheckResult:
    """Compare tape gradients with ``(f(p+eps) - f(p-eps)) / (2 eps)``.

    Coordinates are drawn round-robin over the parameter tensors so every
    tensor is covered. When ``skip_unstable`` is set, a coordinate whose
    perturbation changes any discrete branch (relu sign, top-k selection,
    argmax) is skipped instead of compared. ``loss_fn`` must be
    deterministic: random masks have to be frozen outside of it.
    """
    base = {k: np.asarray(v, dtype=dtype).copy() for k, v in params.items()}
    f0, sig0, tape, watched, out = _evaluate(loss_fn, base)
    f0b, sig0b, *_ = _evaluate(loss_fn, base)
    if f0 != f0b or sig0 != sig0b:
        raise ContractError("loss_fn is not deterministic; freeze random masks before grad_check")
    grads = {k: g.astype(np.float64) for k, g in tape.gradient(out, watched).items()}

    queues = {k: list(rng.derive("coords", k).permutation(v.size)) for k, v in base.items() if v.size}
    max_attempts = max_attempts or 20 * n_coords
    result = GradCheckResult(0.0, 0, 0, {k: 0.0 for k in queues}, {k: 0 for k in queues})
    attempts = 0
    while result.checked < n_coords and attempts < max_attempts and any(queues.values()):
        for name, queue in queues.items():
            if not queue or result.checked >= n_coords:
                continue
            attempts += 1
            idx = int(queue.pop())
            flat = base[name].reshape(-1)
            orig = flat[idx]
            flat[idx] = orig + eps
            fp, sp, *_ = _evaluate(loss_fn, base)
            flat[idx] = orig - eps
            fm, sm, *_ = _evaluate(loss_fn, base)
            flat[idx] = orig
            if skip_unstable and (sp != sig0 or sm != sig0):
                result.skipped += 1
                continue
            numeric = (fp - fm) / (2 * eps)
            analytic = float(grads[name].reshape(-1)[idx])
            err = relative_error(analytic, numeric)
            result.checked += 1
            result.per_tensor[name] = max(result.per_tensor[name], err)
            result.coverage[name] += 1
            if err >= result.max_rel_error:
                result.max_rel_error = err
                result.worst = (name, idx, analytic, numeric)
    return result


def model_grad_check(
    arch,
    steps: int = 4,
    batch: int = 2,
    seed: int = 0,
    n_coords: int = 200,
    eps: float = 1e-3,
    fire_rate: float = 0.5,
    gamma: float = 2.0,
    spread: float = 0.3,
) -> GradCheckResult:
    """Focal loss of the whole model against finite differences, masks frozen.

    Parameters start from the usual initialization plus uniform noise of
    half-width ``spread``, so the zero-initialized tensors get a nonzero
    gradient signal too.
    """
    from anca.classifier import LossConfig, focal_loss
    from anca.model import forward
    from anca.nca import RolloutConfig, step_masks
    from anca.optim import init_params

    rng = Rng(seed)
    size = arch.input_size
    params = init_params(arch, rng.derive("gradcheck-init"))
    params = {k: v.astype(np.float64) + rng.derive("gradcheck-noise", k).uniform(v.shape, -spread, spread, np.float64)
              for k, v in params.items()}
    images = rng.derive("gradcheck-images").normal((batch, size, size, 3), dtype=np.float64)
    labels = rng.derive("gradcheck-labels").integers(0, arch.classes, batch)
    masks = step_masks(rng.derive("gradcheck-delta"), steps, (batch, size, size), fire_rate)
    rc = RolloutConfig(steps, fire_rate)
    loss_cfg = LossConfig(gamma)

    def loss_fn(p):
        return focal_loss(forward(p, images, arch, rc, masks), labels, loss_cfg)

    return grad_check(loss_fn, params, rng.derive("gradcheck-coords"), eps=eps, n_coords=n_coords)
