"""Synthetic two-class image set: bright disks versus bright bars on a dark field."""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np

from anca.imageio import write_png
from anca.rng import Rng

CLASSES = ("bar", "disk")


def render(kind: str, size: int, g: np.random.Generator) -> np.ndarray:
    """One ``(size, size, 3)`` uint8 image of a ``"disk"`` or a ``"bar"``."""
    s = size / 32.0
    yy, xx = np.meshgrid(np.arange(size) + 0.5, np.arange(size) + 0.5, indexing="ij")
    if kind == "disk":
        r = g.uniform(6.0, 9.0) * s
        cy, cx = g.uniform(r + 1, size - r - 1, size=2)
        shape = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    elif kind == "bar":
        length, width = g.uniform(14.0, 22.0) * s, g.uniform(2.5, 3.5) * s
        a = g.uniform(0.0, math.pi)
        half = length / 2 + width
        cy, cx = g.uniform(half, size - half, size=2) if half < size / 2 else (size / 2, size / 2)
        along = (yy - cy) * math.sin(a) + (xx - cx) * math.cos(a)
        across = -(yy - cy) * math.cos(a) + (xx - cx) * math.sin(a)
        shape = (np.abs(along) <= length / 2) & (np.abs(across) <= width / 2)
    else:
        raise ValueError(f"unknown toy shape {kind!r}")
    background = g.uniform(0.05, 0.2)
    fg = g.uniform(0.8, 0.95)
    tint = g.uniform(0.9, 1.0, size=3)
    img = np.where(shape[..., None], fg * tint, background)
    img = img + g.normal(0.0, 0.04, size=img.shape)
    return np.clip(np.floor(img * 255 + 0.5), 0, 255).astype(np.uint8)


def generate(root, per_class: int = 200, size: int = 32, seed: int = 0) -> Path:
    """Write ``root/bar/*.png`` and ``root/disk/*.png``; returns ``root``."""
    root = Path(root)
    for kind in CLASSES:
        d = root / kind
        d.mkdir(parents=True, exist_ok=True)
        for i in range(per_class):
            g = Rng(seed).derive("toy", kind, i).generator()
            write_png(d / f"{kind}_{i:04d}.png", render(kind, size, g))
    return root
