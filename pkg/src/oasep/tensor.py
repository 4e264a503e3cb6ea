"""Minimal dense tensor with reverse-mode autodiff.

Tensors wrap a float64 numpy array and optionally participate in a
dynamically built computation graph.  The op set is deliberately closed:
everything the model needs is here, every gradient rule is hand-written
and finite-difference tested, and nothing else exists.

Broadcasting is restricted to singleton axes (plus scalars); general
numpy broadcasting is out of scope.
"""

from __future__ import annotations

import contextlib
import struct
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "no_grad",
    "set_debug_checks",
    "backward",
    "stack",
    "conv1x1",
    "mean_pool_ft",
    "save_tensor",
    "load_tensor",
    "macs",
]


class ShapeError(ValueError):
    pass


_grad_enabled = True
_debug_checks = False


def set_debug_checks(flag: bool) -> None:
    """Enable NaN/Inf checking after every op (slow; for debugging)."""
    global _debug_checks
    _debug_checks = flag


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class MacCounter:
    """Global multiply-accumulate counter for the complexity benchmarks.

    Conventions: a matmul of (M,K)x(K,N) counts M*K*N; an elementwise
    multiply or divide counts one MAC per output element; additions,
    nonlinearities and data movement count zero.  The selective scan adds
    its own contribution (see ssm.SCAN_MACS_PER_STATE).
    """

    def __init__(self):
        self.enabled = False
        self.total = 0

    def add(self, n: int) -> None:
        if self.enabled:
            self.total += int(n)

    @contextlib.contextmanager
    def counting(self):
        self.total = 0
        self.enabled = True
        try:
            yield self
        finally:
            self.enabled = False


macs = MacCounter()


def _check_broadcast(sa: tuple, sb: tuple) -> tuple:
    """Singleton-axis broadcast shape, or raise.  Scalars always allowed."""
    if sa == sb or sb == () or sa == ():
        return sa if sb == () else (sb if sa == () else sa)
    if len(sa) != len(sb):
        raise ShapeError(f"rank mismatch for broadcast: {sa} vs {sb}")
    out = []
    for da, db in zip(sa, sb):
        if da == db:
            out.append(da)
        elif da == 1 or db == 1:
            out.append(max(da, db))
        else:
            raise ShapeError(f"shapes {sa} and {sb} not singleton-broadcastable")
    return tuple(out)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient back down to the shape it was broadcast from."""
    if grad.shape == shape:
        return grad
    if shape == ():
        return np.asarray(grad.sum())
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = _parents
        self._backward_fn = _backward
        if _debug_checks and not np.all(np.isfinite(self.data)):
            raise FloatingPointError("non-finite values in tensor")

    # -- introspection -------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    # -- graph plumbing ------------------------------------------------

    @staticmethod
    def _make(data, parents, backward):
        track = _grad_enabled and any(p.requires_grad for p in parents)
        if track:
            return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward)
        return Tensor(data)

    def backward(self) -> None:
        backward(self)

    # -- binary elementwise -------------------------------------------

    def __add__(self, other):
        other = _as_tensor(other)
        _check_broadcast(self.shape, other.shape)
        out_data = self.data + other.data

        def bwd(g, a=self, b=other):
            if a.requires_grad:
                a._accum(_unbroadcast(g, a.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(g, b.shape))

        return Tensor._make(out_data, (self, other), bwd)

    __radd__ = __add__

    def __mul__(self, other):
        other = _as_tensor(other)
        _check_broadcast(self.shape, other.shape)
        out_data = self.data * other.data
        macs.add(out_data.size)

        def bwd(g, a=self, b=other):
            if a.requires_grad:
                a._accum(_unbroadcast(g * b.data, a.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(g * a.data, b.shape))

        return Tensor._make(out_data, (self, other), bwd)

    __rmul__ = __mul__

    def __neg__(self):
        def bwd(g, a=self):
            if a.requires_grad:
                a._accum(-g)

        return Tensor._make(-self.data, (self,), bwd)

    def __sub__(self, other):
        return self + (-_as_tensor(other))

    def __rsub__(self, other):
        return _as_tensor(other) + (-self)

    def __truediv__(self, other):
        other = _as_tensor(other)
        _check_broadcast(self.shape, other.shape)
        out_data = self.data / other.data
        macs.add(out_data.size)

        def bwd(g, a=self, b=other, od=out_data):
            if a.requires_grad:
                a._accum(_unbroadcast(g / b.data, a.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(-g * od / b.data, b.shape))

        return Tensor._make(out_data, (self, other), bwd)

    def __pow__(self, expo):
        assert isinstance(expo, (int, float))
        out_data = self.data ** expo

        def bwd(g, a=self, c=expo):
            if a.requires_grad:
                a._accum(g * c * a.data ** (c - 1))

        return Tensor._make(out_data, (self,), bwd)

    # -- unary elementwise --------------------------------------------

    def exp(self):
        out_data = np.exp(self.data)

        def bwd(g, a=self, od=out_data):
            if a.requires_grad:
                a._accum(g * od)

        return Tensor._make(out_data, (self,), bwd)

    def log(self):
        out_data = np.log(self.data)

        def bwd(g, a=self):
            if a.requires_grad:
                a._accum(g / a.data)

        return Tensor._make(out_data, (self,), bwd)

    def sigmoid(self):
        out_data = _sigmoid_np(self.data)

        def bwd(g, a=self, od=out_data):
            if a.requires_grad:
                a._accum(g * od * (1.0 - od))

        return Tensor._make(out_data, (self,), bwd)

    def softplus(self):
        out_data = softplus_np(self.data)

        def bwd(g, a=self):
            if a.requires_grad:
                a._accum(g * _sigmoid_np(a.data))

        return Tensor._make(out_data, (self,), bwd)

    def silu(self):
        s = _sigmoid_np(self.data)
        out_data = self.data * s

        def bwd(g, a=self, s=s):
            if a.requires_grad:
                a._accum(g * (s * (1.0 + a.data * (1.0 - s))))

        return Tensor._make(out_data, (self,), bwd)

    # -- matmul --------------------------------------------------------

    def matmul(self, other):
        other = _as_tensor(other)
        a, b = self.data, other.data
        if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
            raise ShapeError(f"matmul inner-dimension mismatch: {a.shape} @ {b.shape}")
        out_data = np.matmul(a, b)
        macs.add(out_data.size * a.shape[-1])

        def bwd(g, ta=self, tb=other):
            if ta.requires_grad:
                ga = np.matmul(g, np.swapaxes(tb.data, -1, -2))
                ta._accum(_unbroadcast_matmul(ga, ta.shape))
            if tb.requires_grad:
                gb = np.matmul(np.swapaxes(ta.data, -1, -2), g)
                tb._accum(_unbroadcast_matmul(gb, tb.shape))

        return Tensor._make(out_data, (self, other), bwd)

    __matmul__ = matmul

    # -- axis ops ------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        out_data = self.data.reshape(shape)

        def bwd(g, a=self, old=old):
            if a.requires_grad:
                a._accum(g.reshape(old))

        return Tensor._make(out_data, (self,), bwd)

    def transpose(self, perm: Sequence[int]):
        perm = tuple(perm)
        if sorted(perm) != list(range(self.ndim)):
            raise ShapeError(f"invalid permutation {perm} for rank {self.ndim}")
        inv = tuple(np.argsort(perm))
        out_data = np.transpose(self.data, perm)

        def bwd(g, a=self, inv=inv):
            if a.requires_grad:
                a._accum(np.transpose(g, inv))

        return Tensor._make(out_data, (self,), bwd)

    def flip(self, axis: int):
        if not -self.ndim <= axis < self.ndim:
            raise ShapeError(f"flip axis {axis} out of range for rank {self.ndim}")
        out_data = np.flip(self.data, axis).copy()

        def bwd(g, a=self, ax=axis):
            if a.requires_grad:
                a._accum(np.flip(g, ax))

        return Tensor._make(out_data, (self,), bwd)

    def sum(self, axis=None, keepdims: bool = False):
        out_data = self.data.sum(axis=axis, keepdims=keepdims)

        def bwd(g, a=self, ax=axis, kd=keepdims):
            if not a.requires_grad:
                return
            if ax is None:
                a._accum(np.broadcast_to(g, a.shape).copy())
            else:
                gg = g if kd else np.expand_dims(g, ax)
                a._accum(np.broadcast_to(gg, a.shape).copy())

        return Tensor._make(out_data, (self,), bwd)

    def mean(self, axis=None, keepdims: bool = False):
        n = self.size if axis is None else self.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def take0(self, index: int):
        """Select one slice along axis 0 (gradient scatters back)."""
        if not 0 <= index < self.shape[0]:
            raise ShapeError(f"index {index} out of range for axis length {self.shape[0]}")
        out_data = self.data[index].copy()

        def bwd(g, a=self, i=index):
            if a.requires_grad:
                full = np.zeros_like(a.data)
                full[i] = g
                a._accum(full)

        return Tensor._make(out_data, (self,), bwd)

    def split(self, axis: int, parts: int) -> list["Tensor"]:
        if self.shape[axis] % parts != 0:
            raise ShapeError(f"axis {axis} length {self.shape[axis]} not divisible by {parts}")
        pieces = np.split(self.data, parts, axis=axis)
        outs = []
        for i, piece in enumerate(pieces):
            def bwd(g, a=self, ax=axis, idx=i, nparts=parts):
                if not a.requires_grad:
                    return
                full = np.zeros_like(a.data)
                step = a.shape[ax] // nparts
                sl = [slice(None)] * a.ndim
                sl[ax] = slice(idx * step, (idx + 1) * step)
                full[tuple(sl)] = g
                a._accum(full)

            outs.append(Tensor._make(piece.copy(), (self,), bwd))
        return outs


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast_matmul(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce batched-matmul gradients over broadcast leading axes."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, s in enumerate(shape[:-2]):
        if s == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus_np(x: np.ndarray) -> np.ndarray:
    # log1p(exp(x)) with an overflow-safe branch: for x > 30, softplus(x) ~ x
    x = np.asarray(x, dtype=np.float64)
    return np.where(x > 30.0, x, np.log1p(np.exp(np.minimum(x, 30.0))))


def stack(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise ShapeError(f"stack needs equal shapes, got {shapes}")
    out_data = np.stack([t.data for t in tensors], axis=axis)

    def bwd(g, ts=tensors, ax=axis):
        pieces = np.split(g, len(ts), axis=ax)
        for t, piece in zip(ts, pieces):
            if t.requires_grad:
                t._accum(np.squeeze(piece, axis=ax))

    return Tensor._make(out_data, tuple(tensors), bwd)


def conv1x1(x: Tensor, w: Tensor, bias: Tensor | None = None) -> Tensor:
    """Per-position channel mixing over a (B, C_in, F, T) tensor."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.ndim != 4 or w.ndim != 2 or w.shape[1] != x.shape[1]:
        raise ShapeError(f"conv1x1 channel mismatch: x {x.shape}, w {w.shape}")
    out_data = np.einsum("bift,oi->boft", x.data, w.data)
    macs.add(out_data.size * x.shape[1])
    if bias is not None:
        out_data = out_data + bias.data[None, :, None, None]
    parents = (x, w) if bias is None else (x, w, bias)

    def bwd(g, tx=x, tw=w, tb=bias):
        if tx.requires_grad:
            tx._accum(np.einsum("boft,oi->bift", g, tw.data))
        if tw.requires_grad:
            tw._accum(np.einsum("boft,bift->oi", g, tx.data))
        if tb is not None and tb.requires_grad:
            tb._accum(g.sum(axis=(0, 2, 3)))

    return Tensor._make(out_data, parents, bwd)


def mean_pool_ft(x: Tensor) -> Tensor:
    """Mean over the (F, T) grid, channel axis moved last: (B,C,F,T) -> (B,1,C)."""
    if x.ndim != 4:
        raise ShapeError(f"mean_pool_ft expects rank 4, got {x.shape}")
    b, c, f, t = x.shape
    return (x.sum(axis=3).sum(axis=2) * (1.0 / (f * t))).reshape(b, 1, c)


def backward(loss: Tensor) -> None:
    """Reverse-mode sweep from a scalar loss; gradients land in .grad."""
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack_ = [(loss, False)]
    while stack_:
        node, processed = stack_.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack_.append((p, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward_fn is not None:
            node._backward_fn(node.grad)
            # free intermediate gradients / graph refs as we go
            if node is not loss:
                node.grad = None
                node._parents = ()
                node._backward_fn = None


# -- serialization -----------------------------------------------------

_MAGIC = b"OATN"
_FORMAT_VERSION = 1


def save_tensor(fh, array: np.ndarray) -> None:
    """Write one array in the little-endian "OATN" binary format."""
    arr = np.asarray(array, dtype="<f8", order="C")
    fh.write(_MAGIC)
    fh.write(struct.pack("<I", _FORMAT_VERSION))
    fh.write(struct.pack("<I", arr.ndim))
    for s in arr.shape:
        fh.write(struct.pack("<Q", s))
    fh.write(arr.tobytes())


def load_tensor(fh) -> np.ndarray:
    magic = fh.read(4)
    if magic != _MAGIC:
        raise ValueError(f"bad tensor magic {magic!r}")
    (version,) = struct.unpack("<I", fh.read(4))
    if version != _FORMAT_VERSION:
        raise ValueError(f"unsupported tensor format version {version}")
    (rank,) = struct.unpack("<I", fh.read(4))
    shape = tuple(struct.unpack("<Q", fh.read(8))[0] for _ in range(rank))
    count = int(np.prod(shape)) if shape else 1
    data = np.frombuffer(fh.read(8 * count), dtype="<f8").reshape(shape)
    return data.astype(np.float64).copy()
