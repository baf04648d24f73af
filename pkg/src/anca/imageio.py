"""Image reading (PNG via Pillow, binary netpbm by hand) and netpbm writing."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from anca.errors import DataError

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".ppm", ".pgm")


def _read_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    n = len(buf)
    while pos < n:
        c = buf[pos:pos + 1]
        if c == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
        pos += 1
    return buf[start:pos], pos


def parse_netpbm(buf: bytes) -> np.ndarray:
    """Decode binary P5 (gray) or P6 (RGB) with maxval <= 255."""
    magic, pos = _read_token(buf, 0)
    if magic not in (b"P5", b"P6"):
        raise DataError(f"unsupported netpbm magic {magic!r}")
    try:
        w, pos = _read_token(buf, pos)
        h, pos = _read_token(buf, pos)
        maxval, pos = _read_token(buf, pos)
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError as e:
        raise DataError(f"malformed netpbm header: {e}") from None
    if not 0 < maxval <= 255:
        raise DataError(f"only 8-bit netpbm is supported (maxval {maxval})")
    pos += 1  # single whitespace after maxval
    channels = 3 if magic == b"P6" else 1
    size = w * h * channels
    pixels = np.frombuffer(buf, dtype=np.uint8, count=size, offset=pos) if len(buf) - pos >= size else None
    if pixels is None:
        raise DataError("truncated netpbm pixel data")
    img = pixels.reshape(h, w, channels) if channels == 3 else pixels.reshape(h, w)
    if maxval != 255:
        img = np.round(img.astype(np.float64) * (255.0 / maxval)).astype(np.uint8)
    return img.copy()


def read_image(path) -> np.ndarray:
    """8-bit RGB ``(H, W, 3)`` array. Gray images are replicated to three channels."""
    path = Path(path)
    try:
        if path.suffix.lower() in (".ppm", ".pgm"):
            img = parse_netpbm(path.read_bytes())
        else:
            from PIL import Image

            with Image.open(path) as im:
                img = np.asarray(im.convert("RGB"), dtype=np.uint8)
    except (OSError, ValueError, DataError) as e:
        raise DataError(f"cannot read image {path}: {e}") from None
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=-1)
    return img


def encode_netpbm(img: np.ndarray) -> bytes:
    img = np.asarray(img)
    if img.dtype != np.uint8:
        raise DataError(f"netpbm export expects uint8, got {img.dtype}")
    if img.ndim == 2:
        magic = b"P5"
    elif img.ndim == 3 and img.shape[2] == 3:
        magic = b"P6"
    else:
        raise DataError(f"cannot encode image of shape {img.shape}")
    h, w = img.shape[:2]
    return magic + f"\n{w} {h}\n255\n".encode() + np.ascontiguousarray(img).tobytes()


def write_netpbm(path, img: np.ndarray) -> None:
    Path(path).write_bytes(encode_netpbm(img))


def write_png(path, img: np.ndarray) -> None:
    from PIL import Image

    Image.fromarray(np.asarray(img, dtype=np.uint8)).save(path)
