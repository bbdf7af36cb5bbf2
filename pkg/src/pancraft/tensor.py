"""Dense float tensors with a reverse-mode gradient tape.

Images use (batch, channel, height, width) layout throughout. Training runs
in float32; gradient checking switches the whole stack to float64 via
`use_dtype`, because central differences at h=1e-5 drown in float32 noise.

Tensors are immutable after creation except through the tape; the tape is a
flat list of recorded operations in execution order (which is always a valid
topological order), and `backward` walks it once in reverse.
"""

from __future__ import annotations

import os
from contextlib import contextmanager

import numpy as np

_DEFAULT_DTYPE = np.float32
_TAPE_STACK: list["Tape"] = []


def default_dtype():
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}; use float32 or float64")
    _DEFAULT_DTYPE = dtype.type


@contextmanager
def use_dtype(dtype):
    """Temporarily switch the default dtype (e.g. float64 for grad checks)."""
    global _DEFAULT_DTYPE
    prev = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _DEFAULT_DTYPE = prev


def limit_threads(n: int | None = None) -> None:
    """Cap BLAS kernel parallelism.

    Reads PANCRAFT_THREADS when `n` is None. Uses threadpoolctl when
    available; silently does nothing otherwise (numpy stays deterministic
    per-run either way, this only pins the thread count across machines).
    """
    if n is None:
        raw = os.environ.get("PANCRAFT_THREADS")
        if not raw:
            return
        n = int(raw)
    try:
        import threadpoolctl

        threadpoolctl.threadpool_limits(limits=n)
    except ImportError:
        pass


class Tensor:
    """A dense n-d float array, optionally attached to the active tape."""

    __slots__ = ("data", "grad", "requires_grad", "_node")

    def __init__(self, data, dtype=None, requires_grad: bool = False):
        if dtype is None:
            dt = getattr(data, "dtype", None)
            if isinstance(data, (np.ndarray, np.generic)) and dt in (np.float32, np.float64):
                dtype = dt
            else:
                dtype = _DEFAULT_DTYPE
        arr = np.asarray(data, dtype=dtype)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self._node = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        """A view of the same data with no tape node; never receives gradients."""
        return Tensor(self.data)

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name})"

    # arithmetic sugar; scalars and tensors both work
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)


class _Node:
    __slots__ = ("parents", "back", "tape", "grad")

    def __init__(self, parents, back, tape):
        self.parents = parents
        self.back = back
        self.tape = tape
        self.grad = None


class Tape:
    """Ordered record of operations for one reverse sweep.

    Entries are appended in execution order, so every entry's inputs were
    produced by earlier entries or are leaves. `backward` may be called for
    several losses before `reset`; leaf gradients accumulate.
    """

    def __init__(self):
        self.entries: list[_Node] = []

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        _TAPE_STACK.pop()
        return False

    def __len__(self):
        return len(self.entries)

    def reset(self) -> None:
        self.entries.clear()

    def backward(self, loss: Tensor, release: bool = False) -> None:
        """Reverse sweep from a scalar loss.

        `release=True` drops each entry's saved closures once visited, so
        forward activations free progressively; the tape can then only be
        reset, not swept again (training uses this, gradient checks do not).
        """
        if loss.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        node = loss._node
        if node is None or node.tape is not self:
            raise ValueError("loss tensor is detached from this tape")
        node.grad = np.ones_like(loss.data)
        for entry in reversed(self.entries):
            if entry.grad is None:
                if release:
                    entry.back = entry.parents = None
                continue
            grads = entry.back(entry.grad)
            for parent, g in zip(entry.parents, grads):
                if g is None:
                    continue
                pnode = parent._node
                if pnode is not None and pnode.tape is self:
                    pnode.grad = g if pnode.grad is None else pnode.grad + g
                elif parent.requires_grad:
                    parent.grad += g
            entry.grad = None
            if release:
                entry.back = entry.parents = None


def active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def backward(loss: Tensor) -> None:
    """Run the reverse sweep from a scalar loss recorded on the active tape."""
    node = loss._node
    if node is None:
        raise ValueError("loss tensor is detached from the tape")
    node.tape.backward(loss)


def _tracked(t: Tensor, tape: Tape) -> bool:
    return t.requires_grad or (t._node is not None and t._node.tape is tape)


def record(out_data: np.ndarray, parents: tuple[Tensor, ...], back) -> Tensor:
    """Wrap an op result, attaching it to the active tape when any parent is live.

    `back(grad) -> tuple` returns one gradient array (or None) per parent.
    """
    out = Tensor(out_data)
    tape = active_tape()
    if tape is not None and any(_tracked(p, tape) for p in parents):
        node = _Node(parents, back, tape)
        tape.entries.append(node)
        out._node = node
    return out


class Param:
    """A named learnable tensor with a persistent gradient buffer."""

    def __init__(self, value, name: str, dtype=None):
        self.value = Tensor(value, dtype=dtype, requires_grad=True)
        self.name = name

    @property
    def data(self) -> np.ndarray:
        return self.value.data

    @property
    def grad(self) -> np.ndarray:
        return self.value.grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.value.zero_grad()

    def __repr__(self):
        return f"Param({self.name}, shape={self.shape})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to `shape`."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# primitive taped ops


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return record(out, (a, b), back)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data - b.data

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return record(out, (a, b), back)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data * b.data

    def back(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return record(out, (a, b), back)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return record(-a.data, (a,), lambda g: (-g,))


def absolute(a) -> Tensor:
    """|a| with sign(a) as the subgradient at 0."""
    a = _as_tensor(a)
    sign = np.sign(a.data)
    return record(np.abs(a.data), (a,), lambda g: (g * sign,))


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=True),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.shape).astype(a.dtype, copy=True),)

    return record(out, (a,), back)


def tmean(a) -> Tensor:
    a = _as_tensor(a)
    n = a.size
    out = a.data.mean()

    def back(g):
        return (np.broadcast_to(g / n, a.shape).astype(a.dtype, copy=True),)

    return record(np.asarray(out), (a,), back)


def silu(a) -> Tensor:
    """x * sigmoid(x). The sigmoid is recomputed in backward to keep the
    recorded graph lean."""
    a = _as_tensor(a)
    sig = 1.0 / (1.0 + np.exp(-a.data))
    out = a.data * sig
    del sig

    def back(g):
        sig = 1.0 / (1.0 + np.exp(-a.data))
        return (g * (sig * (1.0 + a.data * (1.0 - sig))),)

    return record(out, (a,), back)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    old = a.shape
    return record(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def concat(tensors, axis: int = 1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return record(out, tuple(tensors), back)


def narrow(a, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice of `length` along `axis`."""
    a = _as_tensor(a)
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)

    def back(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        full[idx] = g
        return (full,)

    return record(np.ascontiguousarray(a.data[idx]), (a,), back)


def stack_halves(a, b, n: int) -> Tensor:
    """Tile `a` over the first n batch rows and `b` over the next n.

    Both inputs are [1, ...]-shaped; used to route per-half parameters when
    one batch carries both reconstruction modes.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    tail = a.shape[1:]
    out = np.concatenate([np.broadcast_to(a.data, (n,) + tail),
                          np.broadcast_to(b.data, (n,) + tail)])

    def back(g):
        return (g[:n].sum(axis=0, keepdims=True), g[n:].sum(axis=0, keepdims=True))

    return record(out, (a, b), back)


def clamp(a, lo: float, hi: float) -> Tensor:
    a = _as_tensor(a)
    out = np.clip(a.data, lo, hi)
    mask = (a.data >= lo) & (a.data <= hi)
    return record(out, (a,), lambda g: (g * mask,))
