"""Parameter sets, initialization, and Adam with exponential learning-rate decay."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from anca.errors import ConfigError
from anca.model import Architecture, param_shapes
from anca.rng import Rng

ZERO_INIT = {"nca.w2", "nca.b2", "pool.theta", "pool.wc", "pool.bc"}

# bias vectors draw from the same bound as the weight matrix feeding them
_FAN_IN_SOURCE = {"nca.b1": "nca.w1", "head.b1": "head.w1", "head.b2": "head.w2"}


class ParamSet(dict):
    """Ordered name -> float32 array map."""

    def count(self) -> int:
        return sum(int(v.size) for v in self.values())

    def copy(self) -> ParamSet:
        return ParamSet({k: v.copy() for k, v in self.items()})

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: tuple(v.shape) for k, v in self.items()}


def _fan_in(shape: tuple[int, ...]) -> int:
    if len(shape) == 3:  # depthwise kernel: one 3x3 window per channel
        return shape[1] * shape[2]
    return shape[-1]


def init_params(arch: Architecture, rng: Rng) -> ParamSet:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) everywhere except the zero-initialized
    residual output layer and pooling weights."""
    shapes = param_shapes(arch)
    params = ParamSet()
    for name, shape in shapes.items():
        if name in ZERO_INIT:
            params[name] = np.zeros(shape, dtype=np.float32)
            continue
        bound = 1.0 / math.sqrt(_fan_in(shapes[_FAN_IN_SOURCE.get(name, name)]))
        params[name] = rng.derive("init", name).uniform(shape, -bound, bound)
    return params


def lr_at(step: int, lr0: float, decay: float) -> float:
    """``lr0 * decay**step``; decay is applied once per optimizer step."""
    if step < 0:
        raise ConfigError(f"step must be >= 0, got {step}")
    return lr0 * decay**step


@dataclass
class AdamState:
    lr0: float = 4e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    decay: float = 0.9999
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    u: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def lr(self) -> float:
        """Learning rate the next step will use."""
        return lr_at(self.t, self.lr0, self.decay)


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], state: AdamState) -> None:
    """Bias-corrected Adam update, in place on ``params`` and ``state``.

    Arithmetic is float64; parameters and moments are stored back in
    their own dtype.
    """
    if set(grads) != set(params):
        raise ConfigError(f"gradient names {sorted(grads)} do not match parameters {sorted(params)}")
    lr = state.lr
    state.t += 1
    bc1 = 1.0 - state.beta1**state.t
    bc2 = 1.0 - state.beta2**state.t
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != p.shape:
            raise ConfigError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(name)
        u = state.u.get(name)
        m = np.zeros(p.shape) if m is None else m.astype(np.float64)
        u = np.zeros(p.shape) if u is None else u.astype(np.float64)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        u = state.beta2 * u + (1.0 - state.beta2) * g * g
        step = lr * (m / bc1) / (np.sqrt(u / bc2) + state.eps)
        p[...] = (p.astype(np.float64) - step).astype(p.dtype)
        state.m[name] = m.astype(p.dtype)
        state.u[name] = u.astype(p.dtype)
