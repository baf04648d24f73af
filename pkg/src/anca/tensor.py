"""Dense arrays with a reverse-mode tape.

A :class:`Tensor` is an immutable numpy array, optionally attached to a
:class:`Tape`. Ops whose inputs live on a tape append one node per primitive;
ops on plain constants just compute. Backward passes run in float64 and cast
back to the dtype of the watched leaf.

Only the op set needed by the aNCA model is provided. Leading axes are
treated as batch axes everywhere, so a whole minibatch is one tape.
"""

from __future__ import annotations

import hashlib
from typing import Callable, Sequence

import numpy as np

from anca.errors import ConfigError, NumericalError

DEFAULT_DTYPE = np.float32

Backward = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    __slots__ = ("data", "tape", "id")

    def __init__(self, data, tape: Tape | None = None, id: int | None = None):
        data = np.asarray(data)
        if data.dtype.kind != "f":
            data = data.astype(DEFAULT_DTYPE)
        data = data.view()
        data.flags.writeable = False
        self.data = data
        self.tape = tape
        self.id = id

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __repr__(self):
        where = "const" if self.tape is None else f"node {self.id}"
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, {where})"


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, (int, float)):
        return Tensor(np.asarray(x, dtype=DEFAULT_DTYPE))
    return Tensor(x)


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out: int, inputs: tuple, backward: Backward):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Single-writer record of one forward pass.

    With ``track_branches`` the tape also keeps a digest of every discrete
    decision made during the forward pass (relu signs, top-k selections,
    argmax positions). Finite-difference checks compare these digests to
    detect perturbations that cross a kink.
    """

    def __init__(self, track_branches: bool = False):
        self._nodes: list[_Node] = []
        self._next_id = 0
        self._leaf_dtypes: dict[int, np.dtype] = {}
        self._branches = hashlib.blake2b(digest_size=16) if track_branches else None

    def __len__(self):
        return len(self._nodes)

    def _new_id(self) -> int:
        i = self._next_id
        self._next_id += 1
        return i

    def watch(self, array) -> Tensor:
        """Register a leaf (a parameter or differentiable input)."""
        arr = np.array(array, copy=True)
        if arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE)
        t = Tensor(arr, self, self._new_id())
        self._leaf_dtypes[t.id] = arr.dtype
        return t

    def record(self, data: np.ndarray, inputs: Sequence[Tensor], backward: Backward) -> Tensor:
        """Append a node. ``backward(g)`` returns one gradient (or None) per input."""
        ids = tuple(t.id if t.tape is self else None for t in inputs)
        out = Tensor(data, self, self._new_id())
        if any(i is not None for i in ids):
            self._nodes.append(_Node(out.id, ids, backward))
        return out

    def note_branch(self, tag: str, decisions: np.ndarray) -> None:
        if self._branches is not None:
            decisions = np.asarray(decisions)
            if decisions.dtype == bool:
                decisions = np.packbits(decisions)
            self._branches.update(tag.encode())
            self._branches.update(np.ascontiguousarray(decisions).tobytes())

    @property
    def tracks_branches(self) -> bool:
        return self._branches is not None

    def branch_signature(self) -> bytes:
        if self._branches is None:
            raise ConfigError("tape was created without track_branches")
        return self._branches.copy().digest()

    def backward(self, out: Tensor, seed: np.ndarray | None = None) -> dict[int, np.ndarray]:
        """Float64 adjoints of every leaf reachable from ``out``, keyed by tensor id."""
        if out.tape is not self:
            raise ConfigError("tensor does not belong to this tape")
        if seed is None:
            if out.data.size != 1:
                raise ConfigError(f"backward needs a seed for non-scalar output {out.shape}")
            seed = np.ones(out.shape)
        grads: dict[int, np.ndarray] = {out.id: np.asarray(seed, dtype=np.float64)}
        for node in reversed(self._nodes):
            g = grads.pop(node.out, None)
            if g is None:
                continue
            for i, gi in zip(node.inputs, node.backward(g)):
                if i is None or gi is None:
                    continue
                gi = np.asarray(gi, dtype=np.float64)
                if i in grads:
                    grads[i] = grads[i] + gi
                else:
                    grads[i] = gi
        return {i: g for i, g in grads.items() if i in self._leaf_dtypes}

    def gradient(self, out: Tensor, wrt, seed=None):
        """Gradients of ``out`` w.r.t. a dict or list of watched tensors.

        Results are cast to each leaf's dtype; unreachable leaves get zeros.
        """
        adj = self.backward(out, seed)

        def one(t: Tensor) -> np.ndarray:
            g = adj.get(t.id)
            if g is None:
                return np.zeros(t.shape, dtype=t.dtype)
            return g.astype(t.dtype).reshape(t.shape)

        if isinstance(wrt, dict):
            return {k: one(t) for k, t in wrt.items()}
        return [one(t) for t in wrt]


def _tape_of(*tensors: Tensor) -> Tape | None:
    tape = None
    for t in tensors:
        if t.tape is not None:
            if tape is not None and t.tape is not tape:
                raise ConfigError("inputs belong to different tapes")
            tape = t.tape
    return tape


def _emit(data: np.ndarray, inputs: Sequence[Tensor], backward: Backward) -> Tensor:
    tape = _tape_of(*inputs)
    if tape is None:
        return Tensor(data)
    return tape.record(data, inputs, backward)


def check_finite(name: str, x: np.ndarray) -> None:
    if np.isnan(x).any():
        raise NumericalError(f"{name}: NaN in input")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise and structural ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _emit(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    x, y = a.data, b.data
    return _emit(x * y, (a, b), lambda g: (_unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape)))


def reshape(a: Tensor, shape) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    return _emit(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _emit(data, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)))


def sum_all(a: Tensor) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    return _emit(np.asarray(a.data.sum(), dtype=a.dtype), (a,), lambda g: (np.broadcast_to(g, shape),))


def mean_all(a: Tensor) -> Tensor:
    a = as_tensor(a)
    shape, n = a.shape, a.data.size
    out = np.asarray(a.data.sum(dtype=np.float64) / n, dtype=a.dtype)
    return _emit(out, (a,), lambda g: (np.broadcast_to(g / n, shape),))


def masked_residual(state: Tensor, update: Tensor, mask: np.ndarray) -> Tensor:
    """``state + update`` on cells where ``mask`` is set, ``state`` elsewhere.

    ``mask`` has the state's shape minus the channel axis and is a constant.
    Unmasked cells are copied bitwise.
    """
    state, update = as_tensor(state), as_tensor(update)
    if state.shape != update.shape:
        raise ConfigError(f"state {state.shape} and update {update.shape} differ")
    m = np.asarray(mask)[..., None] != 0
    if m.shape[:-1] != state.shape[:-1]:
        raise ConfigError(f"mask shape {np.shape(mask)} does not match state {state.shape}")
    out = np.where(m, state.data + update.data, state.data)
    return _emit(out, (state, update), lambda g: (g, np.where(m, g, 0.0)))


# ---------------------------------------------------------------------------
# layers


def conv3x3_depthwise(x, kernels) -> Tensor:
    """Per-channel 3x3 cross-correlation with one cell of zero padding.

    ``x`` is ``(..., H, W, n)`` and ``kernels`` is ``(n, 3, 3)``;
    ``out[i, j, c] = sum_{di, dj} x[i+di, j+dj, c] * kernels[c, di+1, dj+1]``.
    """
    x, kernels = as_tensor(x), as_tensor(kernels)
    if x.data.ndim < 3:
        raise ConfigError(f"conv3x3_depthwise expects (..., H, W, n), got {x.shape}")
    n = x.shape[-1]
    if kernels.shape != (n, 3, 3):
        raise ConfigError(f"kernels {kernels.shape} do not match {n} input channels")
    lead, (H, W) = x.shape[:-3], x.shape[-3:-1]
    Wn = W * n
    # rows of (W+2)*n contiguous values keep numpy's inner loops long
    xp = np.pad(x.data.reshape(-1, H, W, n), [(0, 0), (1, 1), (1, 1), (0, 0)]).reshape(-1, H + 2, (W + 2) * n)
    k = kernels.data
    taps = np.tile(k.transpose(1, 2, 0), (1, 1, W))  # (3, 3, W*n)
    out = np.zeros((xp.shape[0], H, Wn), dtype=np.result_type(x.dtype, k.dtype))
    for di in range(3):
        for dj in range(3):
            out += xp[:, di:di + H, dj * n:dj * n + Wn] * taps[di, dj]

    def backward(g):
        g3 = g.reshape(-1, H, Wn)
        gxp = np.zeros(xp.shape, dtype=np.float64)
        gk = np.empty((n, 3, 3), dtype=np.float64)
        for di in range(3):
            for dj in range(3):
                gxp[:, di:di + H, dj * n:dj * n + Wn] += g3 * taps[di, dj]
                window = xp[:, di:di + H, dj * n:dj * n + Wn]
                gk[:, di, dj] = np.einsum("bhk,bhk->k", g3, window).reshape(W, n).sum(axis=0)
        gx = gxp.reshape(-1, H + 2, W + 2, n)[:, 1:-1, 1:-1, :].reshape(*lead, H, W, n)
        return gx, gk

    out = out.reshape(*lead, H, W, n)
    return _emit(out, (x, kernels), backward)


def dense(x, W, b) -> Tensor:
    """``W @ x + b`` over the last axis of ``x``."""
    x, W, b = as_tensor(x), as_tensor(W), as_tensor(b)
    if W.data.ndim != 2 or x.shape[-1] != W.shape[1] or b.shape != (W.shape[0],):
        raise ConfigError(f"dense shapes do not conform: x {x.shape}, W {W.shape}, b {b.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, W.shape[1])
    Wd = W.data
    out = (x2 @ Wd.T + b.data).reshape(*lead, W.shape[0])

    def backward(g):
        g2 = g.reshape(-1, Wd.shape[0])
        gx = (g2 @ Wd).reshape(*lead, Wd.shape[1])
        gW = g2.T @ x2.astype(np.float64)
        return gx, gW, g2.sum(axis=0)

    return _emit(out, (x, W, b), backward)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)


def _softmax(x: np.ndarray) -> np.ndarray:
    z = np.exp(x - x.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def activate(kind: str, x) -> Tensor:
    """relu, sigmoid, or softmax (over the last axis)."""
    x = as_tensor(x)
    check_finite(kind, x.data)
    xd = x.data
    if kind == "relu":
        on = xd > 0
        tape = _tape_of(x)
        if tape is not None:
            tape.note_branch("relu", on)
        return _emit(np.where(on, xd, 0).astype(xd.dtype), (x,), lambda g: (np.where(on, g, 0.0),))
    if kind == "sigmoid":
        s = _sigmoid(xd)
        return _emit(s, (x,), lambda g: (g * s * (1.0 - s.astype(np.float64)),))
    if kind == "softmax":
        p = _softmax(xd)

        def backward(g):
            pd = p.astype(np.float64)
            return (pd * (g - (g * pd).sum(axis=-1, keepdims=True)),)

        return _emit(p, (x,), backward)
    raise ConfigError(f"unknown activation {kind!r}")


def relu(x) -> Tensor:
    return activate("relu", x)


def sigmoid(x) -> Tensor:
    return activate("sigmoid", x)


def softmax(x) -> Tensor:
    return activate("softmax", x)
