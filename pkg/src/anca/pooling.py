"""Spatial pooling of the final NCA state into an n-vector.

``attention`` gates every cell by ``sigmoid(theta)`` for a learned map
``theta`` the size of the grid, then averages the highest ``q`` fraction of
gated values per channel. ``conv_attention`` computes ``theta`` from the
state itself with a 1x1 convolution. ``max`` is plain per-channel max
pooling.
"""

from __future__ import annotations

from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal

import numpy as np

from anca.errors import ConfigError
from anca.tensor import Tensor, _emit, _tape_of, as_tensor, check_finite, dense, mul, reshape, sigmoid

POOL_MODES = ("attention", "conv_attention", "max")


@dataclass(frozen=True)
class PoolConfig:
    mode: str = "attention"
    top_fraction: float = 0.10

    def __post_init__(self):
        if self.mode not in POOL_MODES:
            raise ConfigError(f"pool mode must be one of {POOL_MODES}, got {self.mode!r}")
        if not 0.0 < self.top_fraction <= 1.0:
            raise ConfigError(f"top_fraction must be in (0, 1], got {self.top_fraction}")


def selected_count(q: float, size: int) -> int:
    """``max(1, round_half_up(q * size))``, using the decimal value of ``q``."""
    if not 0.0 < q <= 1.0:
        raise ConfigError(f"q must be in (0, 1], got {q}")
    if size < 1:
        raise ConfigError("cannot pool an empty tensor")
    k = int((Decimal(repr(float(q))) * size).to_integral_value(rounding=ROUND_HALF_UP))
    return max(1, min(k, size))


def top_k_mask(x: np.ndarray, k: int, axis: int = -1) -> np.ndarray:
    """Boolean mask of the ``k`` largest entries along ``axis``.

    Ties at the threshold go to the lower index.
    """
    check_finite("top_k", x)
    x = np.moveaxis(x, axis, -1)
    L = x.shape[-1]
    if k >= L:
        mask = np.ones(x.shape, dtype=bool)
    else:
        thr = np.partition(x, L - k, axis=-1)[..., L - k:L - k + 1]
        above = x > thr
        tied = x == thr
        need = k - above.sum(axis=-1, keepdims=True)
        mask = above | (tied & (np.cumsum(tied, axis=-1) <= need))
    return np.moveaxis(mask, -1, axis)


def top_k_mean(x, k: int, axis: int) -> Tensor:
    """Mean of the ``k`` largest entries along ``axis``; gradient ``1/k`` on those entries."""
    x = as_tensor(x)
    axis = axis % x.data.ndim
    mask = top_k_mask(x.data, k, axis)
    tape = _tape_of(x)
    if tape is not None:
        tape.note_branch("top_k", mask)
    total = np.where(mask, x.data, 0).sum(axis=axis, dtype=np.float64)
    out = (total / k).astype(x.dtype)
    return _emit(out, (x,), lambda g: (np.where(mask, np.expand_dims(g, axis) / k, 0.0),))


def top_q_mean(values, q: float) -> Tensor:
    """Mean of the ``max(1, round(q*H*W))`` largest entries of ``(..., H, W)`` values."""
    values = as_tensor(values)
    if values.data.ndim < 2:
        raise ConfigError(f"top_q_mean expects (..., H, W), got {values.shape}")
    H, W = values.shape[-2:]
    k = selected_count(q, H * W)
    flat = reshape(values, values.shape[:-2] + (H * W,))
    return top_k_mean(flat, k, axis=-1)


def attention_pool(state, theta, q: float) -> Tensor:
    """``out[..., c] = top_q_mean(state[..., c] * sigmoid(theta), q)``.

    ``theta`` is ``(H, W)`` for a learned map or ``(..., H, W)`` for a
    per-sample map.
    """
    state, theta = as_tensor(state), as_tensor(theta)
    if state.data.ndim < 3 or state.shape[-3:-1] != theta.shape[-2:]:
        raise ConfigError(f"attention map {theta.shape} does not match grid {state.shape}")
    H, W, n = state.shape[-3:]
    gated = mul(state, reshape(sigmoid(theta), theta.shape + (1,)))
    flat = reshape(gated, gated.shape[:-3] + (H * W, n))
    return top_k_mean(flat, selected_count(q, H * W), axis=-2)


def conv_attention_map(state, wc, bc) -> Tensor:
    """``theta[i, j] = sum_k state[i, j, k] * wc[k] + bc``: a 1x1 convolution to one channel."""
    state, wc, bc = as_tensor(state), as_tensor(wc), as_tensor(bc)
    n = state.shape[-1]
    if wc.shape != (n,) or bc.shape != (1,):
        raise ConfigError(f"conv attention weights {wc.shape}, {bc.shape} do not match {n} channels")
    theta = dense(state, reshape(wc, (1, n)), bc)
    return reshape(theta, state.shape[:-1])


def max_pool(state) -> Tensor:
    """Per-channel spatial maximum; the gradient goes to the first maximum in row-major order."""
    state = as_tensor(state)
    if state.data.ndim < 3:
        raise ConfigError(f"max_pool expects (..., H, W, n), got {state.shape}")
    H, W, n = state.shape[-3:]
    flat = state.data.reshape(state.shape[:-3] + (H * W, n))
    check_finite("max_pool", flat)
    idx = np.argmax(flat, axis=-2)
    tape = _tape_of(state)
    if tape is not None:
        tape.note_branch("argmax", idx.astype(np.int64))
    out = np.take_along_axis(flat, idx[..., None, :], axis=-2)[..., 0, :]
    shape = state.shape

    def backward(g):
        gf = np.zeros(flat.shape, dtype=np.float64)
        np.put_along_axis(gf, idx[..., None, :], g[..., None, :], axis=-2)
        return (gf.reshape(shape),)

    return _emit(out, (state,), backward)


def attention_gate(theta) -> np.ndarray:
    return sigmoid(theta).data
