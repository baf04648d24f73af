"""Image exports of a trained model: attention gates and NCA trajectories."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from anca.checkpoint import Checkpoint
from anca.data import denormalize, preprocess
from anca.errors import ConfigError
from anca.imageio import read_image, write_netpbm
from anca.model import pool_state
from anca.nca import NcaParams, rollout, step_masks
from anca.pooling import attention_gate, selected_count, top_k_mask
from anca.rng import Rng
from anca.tensor import Tensor


@dataclass
class AttentionExport:
    gate: np.ndarray  # (H, W) uint8, as written
    selected: np.ndarray  # (H, W, n) bool
    embedding: np.ndarray  # (n,)
    paths: dict


def quantize_gate(gate: np.ndarray) -> np.ndarray:
    """Gate values in [0, 1] to 8 bits, ``floor(g * 255 + 0.5)``."""
    return np.clip(np.floor(np.asarray(gate, dtype=np.float64) * 255.0 + 0.5), 0, 255).astype(np.uint8)


def mosaic(tiles: np.ndarray, pad: int = 1) -> np.ndarray:
    """Lay out ``(H, W, n)`` planes on a near-square grid separated by ``pad`` pixels."""
    H, W, n = tiles.shape
    cols = math.ceil(math.sqrt(n))
    rows = math.ceil(n / cols)
    out = np.zeros((rows * (H + pad) - pad, cols * (W + pad) - pad), dtype=tiles.dtype)
    for c in range(n):
        r, k = divmod(c, cols)
        out[r * (H + pad):r * (H + pad) + H, k * (W + pad):k * (W + pad) + W] = tiles[..., c]
    return out


def _load(checkpoint) -> Checkpoint:
    return checkpoint if isinstance(checkpoint, Checkpoint) else Checkpoint.load(checkpoint)


def _run(ckpt: Checkpoint, image_path, record: bool):
    config = ckpt.config
    img = preprocess(read_image(image_path), config.input_size, ckpt.mean, ckpt.std)
    # same mask stream the evaluator uses for the first sample
    rng = Rng(config.eval_seed).derive("eval-delta", 0, 0, 0)
    masks = step_masks(rng, config.steps, img.shape[:2], config.fire_rate)
    params = {k: Tensor(v) for k, v in ckpt.params.items()}
    state, traj = rollout(img, NcaParams.from_mapping(params), config.rollout(record), masks=masks)
    return params, state, traj


def export_attention(checkpoint, image_path, out_path) -> AttentionExport:
    """Write the attention gate as an 8-bit PGM, plus two companions.

    ``<stem>_selected.pgm`` shows, per channel, which cells entered the
    top-q average for this image (white) on a tiled grid; ``<stem>_embedding.txt``
    holds the pooled n-vector, one value per line.
    """
    ckpt = _load(checkpoint)
    arch = ckpt.architecture()
    if arch.pool_mode == "max":
        raise ConfigError("attention export needs attention or conv_attention pooling, checkpoint uses max")
    params, state, _ = _run(ckpt, image_path, record=False)
    v, theta = pool_state(state, params, arch.pool)
    gate = attention_gate(theta)
    H, W, n = state.shape
    gated = state.data * gate[..., None]
    k = selected_count(arch.top_fraction, H * W)
    selected = top_k_mask(gated.reshape(H * W, n), k, axis=0).reshape(H, W, n)

    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    q = quantize_gate(gate)
    sel_path = out_path.with_name(out_path.stem + "_selected.pgm")
    emb_path = out_path.with_name(out_path.stem + "_embedding.txt")
    write_netpbm(out_path, q)
    write_netpbm(sel_path, mosaic(selected.astype(np.uint8) * 255))
    emb_path.write_text("".join(f"{float(x)!r}\n" for x in v.data), encoding="utf-8")
    return AttentionExport(q, selected, v.data.copy(), {"gate": out_path, "selected": sel_path, "embedding": emb_path})


def export_trajectory(checkpoint, image_path, out_dir) -> list[Path]:
    """Write channels 0-2 of every state ``S_0 .. S_T`` as ``frame_NNN.ppm``."""
    ckpt = _load(checkpoint)
    _, _, traj = _run(ckpt, image_path, record=True)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    width = max(3, len(str(len(traj) - 1)))
    paths = []
    for t, s in enumerate(traj):
        p = out / f"frame_{t:0{width}d}.ppm"
        write_netpbm(p, denormalize(s[..., :3], ckpt.mean, ckpt.std))
        paths.append(p)
    return paths
