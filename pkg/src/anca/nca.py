"""The NCA feature extractor: perception, update network, stochastic residual steps."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, NamedTuple

import numpy as np

from anca.errors import ConfigError
from anca.rng import Rng, bernoulli_mask
from anca.tensor import Tape, Tensor, _tape_of, concat, conv3x3_depthwise, dense, masked_residual, relu


class NcaParams(NamedTuple):
    kappa1: Tensor  # (n, 3, 3)
    kappa2: Tensor  # (n, 3, 3)
    w1: Tensor  # (h, 3n)
    b1: Tensor  # (h,)
    w2: Tensor  # (n, h)
    b2: Tensor  # (n,)

    @classmethod
    def from_mapping(cls, params: Mapping[str, Tensor], prefix: str = "nca.") -> NcaParams:
        return cls(*(params[prefix + name] for name in cls._fields))


def nca_param_shapes(n: int, h: int) -> dict[str, tuple[int, ...]]:
    return {
        "kappa1": (n, 3, 3),
        "kappa2": (n, 3, 3),
        "w1": (h, 3 * n),
        "b1": (h,),
        "w2": (n, h),
        "b2": (n,),
    }


def nca_param_count(n: int, h: int) -> int:
    return sum(math.prod(s) for s in nca_param_shapes(n, h).values())


@dataclass(frozen=True)
class RolloutConfig:
    steps: int = 64
    fire_rate: float = 0.5
    record_trajectory: bool = False
    checkpoint_segments: bool = False  # recompute segments of ceil(sqrt(T)) steps during backward

    def __post_init__(self):
        if self.steps < 0:
            raise ConfigError(f"steps must be >= 0, got {self.steps}")
        if not 0.0 < self.fire_rate <= 1.0:
            raise ConfigError(f"fire_rate must be in (0, 1], got {self.fire_rate}")


def seed_state(image: np.ndarray, n: int) -> np.ndarray:
    """Place the (normalized) RGB image in channels 0-2 of an n-channel zero grid."""
    image = np.asarray(image)
    if n < 3:
        raise ConfigError(f"need at least 3 channels to hold an RGB image, got {n}")
    if image.ndim < 3 or image.shape[-1] != 3:
        raise ConfigError(f"expected (..., H, W, 3) image, got {image.shape}")
    dtype = image.dtype if image.dtype.kind == "f" else np.float32
    state = np.zeros(image.shape[:-1] + (n,), dtype=dtype)
    state[..., :3] = image
    return state


def perceive(state, params: NcaParams) -> Tensor:
    """Concatenate ``[state, state * kappa1, state * kappa2]`` along channels."""
    return concat([state, conv3x3_depthwise(state, params.kappa1), conv3x3_depthwise(state, params.kappa2)])


def update_network(perception, params: NcaParams) -> Tensor:
    return dense(relu(dense(perception, params.w1, params.b1)), params.w2, params.b2)


def nca_step(state, params: NcaParams, mask: np.ndarray) -> Tensor:
    """One stochastic step; cells where ``mask`` is 0 are copied unchanged."""
    return masked_residual(state, update_network(perceive(state, params), params), mask)


def step_masks(rng: Rng, steps: int, spatial: tuple[int, ...], fire_rate: float) -> np.ndarray:
    """``(steps, *spatial)`` fire masks, one independent stream per step."""
    out = np.empty((steps, *spatial), dtype=np.float32)
    for t in range(steps):
        out[t] = bernoulli_mask(rng.derive(t), spatial, fire_rate)
    return out


def _segment(state: Tensor, params: NcaParams, masks: np.ndarray) -> Tensor:
    """Run several steps as a single tape node; the backward recomputes them."""
    tape = _tape_of(state, *params)
    if tape is None:
        for m in masks:
            state = nca_step(state, params, m)
        return state

    def run(on: Tape):
        s0 = on.watch(state.data)
        ps = NcaParams(*(on.watch(p.data) for p in params))
        s = s0
        for m in masks:
            s = nca_step(s, ps, m)
        return s0, ps, s

    scratch = Tape(track_branches=tape.tracks_branches)
    _, _, s = run(scratch)
    if tape.tracks_branches:
        tape.note_branch("segment", np.unpackbits(np.frombuffer(scratch.branch_signature(), np.uint8)))
    del scratch

    def backward(g):
        sub = Tape()
        s0, ps, s_end = run(sub)
        adj = sub.backward(s_end, seed=g)
        return (adj.get(s0.id), *(adj.get(p.id) for p in ps))

    return tape.record(s.data, (state, *params), backward)


def rollout(
    image: np.ndarray,
    params: NcaParams,
    cfg: RolloutConfig,
    rng: Rng | None = None,
    masks: np.ndarray | None = None,
):
    """Seed the grid from ``image`` and apply ``cfg.steps`` NCA steps.

    Masks come either from ``rng`` (one stream per step) or are passed in
    directly as a ``(steps, ..., H, W)`` array, which is how a batch with
    per-sample streams or a frozen-mask gradient check drives this.

    Returns ``(final_state, trajectory)``; the trajectory holds the T+1
    states as arrays when ``cfg.record_trajectory`` is set, else ``None``.
    """
    n = params.kappa1.shape[0]
    state = Tensor(seed_state(image, n))
    spatial = state.shape[:-1]
    if masks is None:
        if rng is None:
            raise ConfigError("rollout needs either rng or explicit masks")
        masks = step_masks(rng, cfg.steps, spatial, cfg.fire_rate)
    masks = np.asarray(masks)
    if masks.shape != (cfg.steps, *spatial):
        raise ConfigError(f"masks shape {masks.shape} != {(cfg.steps, *spatial)}")

    trajectory = [state.data.copy()] if cfg.record_trajectory else None
    if cfg.checkpoint_segments and not cfg.record_trajectory and cfg.steps > 1:
        seg = math.ceil(math.sqrt(cfg.steps))
        for start in range(0, cfg.steps, seg):
            state = _segment(state, params, masks[start:start + seg])
        return state, None
    for t in range(cfg.steps):
        state = nca_step(state, params, masks[t])
        if trajectory is not None:
            trajectory.append(state.data.copy())
    return state, trajectory
