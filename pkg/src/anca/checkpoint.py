"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"ANCA" u32 version
    u32 len + utf-8 config text          (TrainConfig.to_text)
    u32 len + utf-8 metadata text        (key = value lines)
    u64 optimizer step, u32 epoch
    u32 tensor count, then per tensor:
        u16 name len + utf-8 name, u8 rank, u32 extents[rank], f32 data
    u8 has_adam; if set, a second tensor block holding "m/<name>" and "u/<name>"
    u32 len + utf-8 metrics CSV          (no wall-clock column)

Serialization is canonical, so save -> load -> save is byte-identical.
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from anca.config import TrainConfig
from anca.errors import AncaError, CheckpointError
from anca.model import param_shapes
from anca.optim import AdamState, ParamSet

MAGIC = b"ANCA"
VERSION = 1
METRIC_COLUMNS = ("epoch", "split", "loss", "accuracy", "balanced_accuracy", "lr")


@dataclass
class Checkpoint:
    config: TrainConfig
    params: ParamSet
    class_names: list[str]
    mean: tuple[float, ...]
    std: tuple[float, ...]
    fold: int = 0
    split_hash: str = ""
    step: int = 0
    epoch: int = 0
    adam: AdamState | None = None
    metrics: list[dict] = field(default_factory=list)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def architecture(self):
        return self.config.architecture(self.num_classes)

    def validate(self) -> None:
        expected = param_shapes(self.architecture())
        got = self.params.shapes()
        if list(expected) != list(got):
            raise CheckpointError(f"parameter names {list(got)} do not match config {list(expected)}")
        for name, shape in expected.items():
            if got[name] != shape:
                raise CheckpointError(f"{name}: shape {got[name]} does not match config {shape}")

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        buf.write(MAGIC)
        buf.write(struct.pack("<I", VERSION))
        _write_text(buf, self.config.to_text())
        _write_text(buf, self._meta_text())
        buf.write(struct.pack("<QI", self.step, self.epoch))
        _write_tensors(buf, list(self.params.items()))
        if self.adam is None:
            buf.write(b"\x00")
        else:
            buf.write(b"\x01")
            items = [(f"m/{k}", self.adam.m[k]) for k in self.params if k in self.adam.m]
            items += [(f"u/{k}", self.adam.u[k]) for k in self.params if k in self.adam.u]
            _write_tensors(buf, items)
        _write_text(buf, metrics_text(self.metrics))
        return buf.getvalue()

    def _meta_text(self) -> str:
        meta = {
            "class_names": json.dumps(self.class_names, ensure_ascii=False),
            "mean": " ".join(repr(float(v)) for v in self.mean),
            "std": " ".join(repr(float(v)) for v in self.std),
            "fold": str(self.fold),
            "split_hash": self.split_hash,
        }
        return "".join(f"{k} = {v}\n" for k, v in meta.items())

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_bytes(self.to_bytes())
        tmp.replace(path)
        return path

    @classmethod
    def from_bytes(cls, data: bytes) -> Checkpoint:
        try:
            return _parse(data)
        except CheckpointError:
            raise
        except (struct.error, UnicodeDecodeError, ValueError, KeyError, json.JSONDecodeError, AncaError) as e:
            raise CheckpointError(f"corrupt checkpoint: {e}") from None

    @classmethod
    def load(cls, path) -> Checkpoint:
        try:
            data = Path(path).read_bytes()
        except OSError as e:
            raise CheckpointError(f"cannot read checkpoint {path}: {e}") from None
        return cls.from_bytes(data)


def metrics_text(rows: list[dict]) -> str:
    lines = [",".join(METRIC_COLUMNS)]
    for r in rows:
        lines.append(",".join(_fmt(r[c]) for c in METRIC_COLUMNS))
    return "\n".join(lines) + "\n"


def parse_metrics(text: str) -> list[dict]:
    lines = text.strip().splitlines()
    if not lines or tuple(lines[0].split(",")) != METRIC_COLUMNS:
        raise CheckpointError("bad metrics block header")
    rows = []
    for line in lines[1:]:
        epoch, split, *nums = line.split(",")
        rows.append({"epoch": int(epoch), "split": split, **dict(zip(METRIC_COLUMNS[2:], map(float, nums)))})
    return rows


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, float) else str(v)


def _write_text(buf, text: str) -> None:
    raw = text.encode("utf-8")
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)


def _write_tensors(buf, items) -> None:
    buf.write(struct.pack("<I", len(items)))
    for name, arr in items:
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("truncated checkpoint")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def text(self) -> str:
        (n,) = self.unpack("<I")
        return self.take(n).decode("utf-8")

    def tensors(self) -> list[tuple[str, np.ndarray]]:
        (count,) = self.unpack("<I")
        out = []
        for _ in range(count):
            (n,) = self.unpack("<H")
            name = self.take(n).decode("utf-8")
            (rank,) = self.unpack("<B")
            shape = self.unpack(f"<{rank}I")
            size = math.prod(shape)
            arr = np.frombuffer(self.take(4 * size), dtype="<f4").astype(np.float32).reshape(shape)
            out.append((name, arr))
        return out


def _parse(data: bytes) -> Checkpoint:
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise CheckpointError("not an aNCA checkpoint (bad magic)")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    config = TrainConfig.from_text(r.text())
    meta = dict(line.split(" = ", 1) for line in r.text().split("\n") if line)
    step, epoch = r.unpack("<QI")
    params = ParamSet(r.tensors())
    (has_adam,) = r.unpack("<B")
    adam = None
    if has_adam:
        adam = AdamState(config.lr0, config.beta1, config.beta2, config.adam_eps, config.decay, t=step)
        for name, arr in r.tensors():
            kind, pname = name.split("/", 1)
            getattr(adam, {"m": "m", "u": "u"}[kind])[pname] = arr
    metrics = parse_metrics(r.text())
    if r.pos != len(data):
        raise CheckpointError("trailing bytes after checkpoint")
    ckpt = Checkpoint(
        config=config,
        params=params,
        class_names=json.loads(meta["class_names"]),
        mean=tuple(float(v) for v in meta["mean"].split()),
        std=tuple(float(v) for v in meta["std"].split()),
        fold=int(meta["fold"]),
        split_hash=meta["split_hash"],
        step=step,
        epoch=epoch,
        adam=adam,
        metrics=metrics,
    )
    ckpt.validate()
    return ckpt
