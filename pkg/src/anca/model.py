"""The full aNCA classifier: rollout -> pooling -> head."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from anca.classifier import HeadParams, head_forward, head_param_shapes
from anca.errors import ConfigError
from anca.nca import NcaParams, RolloutConfig, nca_param_shapes, rollout
from anca.pooling import PoolConfig, attention_pool, conv_attention_map, max_pool
from anca.tensor import Tensor


@dataclass(frozen=True)
class Architecture:
    channels: int = 128
    hidden: int = 128
    classes: int = 2
    input_size: int = 64
    pool_mode: str = "attention"
    top_fraction: float = 0.10

    def __post_init__(self):
        if self.channels < 3:
            raise ConfigError(f"channels must be >= 3, got {self.channels}")
        if self.hidden < 1 or self.classes < 1 or self.input_size < 1:
            raise ConfigError("hidden, classes and input_size must be positive")
        PoolConfig(self.pool_mode, self.top_fraction)

    @property
    def pool(self) -> PoolConfig:
        return PoolConfig(self.pool_mode, self.top_fraction)


def param_shapes(arch: Architecture) -> dict[str, tuple[int, ...]]:
    """Names and shapes of every trainable tensor, in canonical order."""
    n, h = arch.channels, arch.hidden
    shapes = {f"nca.{k}": s for k, s in nca_param_shapes(n, h).items()}
    if arch.pool_mode == "attention":
        shapes["pool.theta"] = (arch.input_size, arch.input_size)
    elif arch.pool_mode == "conv_attention":
        shapes["pool.wc"] = (n,)
        shapes["pool.bc"] = (1,)
    shapes.update({f"head.{k}": s for k, s in head_param_shapes(n, h, arch.classes).items()})
    return shapes


def count_params(arch: Architecture) -> int:
    return sum(math.prod(s) for s in param_shapes(arch).values())


def pool_state(state: Tensor, params: Mapping[str, Tensor], pool: PoolConfig) -> tuple[Tensor, Tensor | None]:
    """Pooled embedding and the attention logits that produced it (None for max pooling)."""
    if pool.mode == "attention":
        theta = params["pool.theta"]
        return attention_pool(state, theta, pool.top_fraction), theta
    if pool.mode == "conv_attention":
        theta = conv_attention_map(state, params["pool.wc"], params["pool.bc"])
        return attention_pool(state, theta, pool.top_fraction), theta
    return max_pool(state), None


def forward(
    params: Mapping[str, Tensor],
    images: np.ndarray,
    arch: Architecture,
    rollout_cfg: RolloutConfig,
    masks: np.ndarray,
) -> Tensor:
    """Class probabilities ``(B, C)`` for a batch of ``(B, H, W, 3)`` images.

    ``masks`` holds the fire masks, ``(T, B, H, W)``.
    """
    images = np.asarray(images)
    if images.ndim != 4 or images.shape[1:] != (arch.input_size, arch.input_size, 3):
        raise ConfigError(f"expected (B, {arch.input_size}, {arch.input_size}, 3) images, got {images.shape}")
    state, _ = rollout(images, NcaParams.from_mapping(params), rollout_cfg, masks=masks)
    v, _ = pool_state(state, params, arch.pool)
    return head_forward(v, HeadParams.from_mapping(params))
