"""Dense float64 tensors with reverse-mode automatic differentiation.

Every op records its parents and an adjoint closure on the output tensor.
``Tensor.backward`` walks the recorded graph in reverse topological order,
so each use of a parameter contributes exactly once to its gradient.
"""
from __future__ import annotations

import contextlib
import struct
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

DTYPE = np.float64
_compute_dtype = DTYPE


@contextlib.contextmanager
def compute_dtype(dtype):
    """Temporarily build new tensors in ``dtype`` (used by extended-precision oracles)."""
    global _compute_dtype
    previous, _compute_dtype = _compute_dtype, dtype
    try:
        yield
    finally:
        _compute_dtype = previous


class GraphError(RuntimeError):
    """Raised when a graph is misused (non-scalar backward, replayed backward)."""


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "_consumed")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), _backward=None, op: str = ""):
        self.data = np.asarray(data, dtype=_compute_dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward: Callable[[np.ndarray], tuple] | None = _backward
        self.op = op
        self._consumed = False

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    # operator sugar
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

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division is only defined by a python scalar")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return tsum(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self) -> None:
        """Populate ``.grad`` on every tensor in the graph that requires it.

        Gradients are rebuilt from zero on each call. A graph may be
        differentiated only once; a second call raises ``GraphError``.
        """
        if self.data.size != 1 or self.ndim > 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {self.shape}")
        if self._consumed:
            raise GraphError("backward already ran on this graph; rebuild the forward pass")
        order = _topo_order(self)
        for node in order:
            if node._consumed:
                raise GraphError(f"graph node '{node.op}' was already differentiated")
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if node.requires_grad:
                node.grad = g if g is not None else np.zeros_like(node.data)
            if g is None or node._backward is None:
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        for node in order:
            if node._parents:
                node._consumed = True


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(data, True, tuple(parents), backward, op)
    return Tensor(data, op=op)


def _is_scalar(x) -> bool:
    if isinstance(x, Tensor):
        return x.data.ndim == 0
    return np.ndim(x) == 0


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    """``a + b`` for equal shapes, a scalar ``b``, or a row-vector bias ``b``."""
    a = as_tensor(a)
    if isinstance(b, Tensor) and _is_scalar(a) and not _is_scalar(b):
        a, b = b, a
    b = as_tensor(b)
    if a.shape == b.shape:
        return _result(a.data + b.data, (a, b), lambda g: (g, g), "add")
    if b.ndim == 0:
        return _result(a.data + b.data, (a, b), lambda g: (g, np.asarray(g.sum())), "add")
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        width = b.shape[0]
        return _result(a.data + b.data, (a, b), lambda g: (g, g.reshape(-1, width).sum(axis=0)), "add_bias")
    raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}")


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def sub(a, b) -> Tensor:
    return add(a, neg(as_tensor(b)))


def mul(a, b) -> Tensor:
    """Elementwise product of equal shapes, or scaling by a scalar."""
    a = as_tensor(a)
    if isinstance(b, Tensor) and _is_scalar(a) and not _is_scalar(b):
        a, b = b, a
    b = as_tensor(b)
    ad, bd = a.data, b.data
    if a.shape == b.shape:
        return _result(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")
    if b.ndim == 0:
        return _result(ad * bd, (a, b), lambda g: (g * bd, np.asarray((g * ad).sum())), "mul")
    raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # branch-free stable form
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def rowscale(x: Tensor, s: Tensor) -> Tensor:
    """Multiply row ``i`` of ``x`` (M x C) by the scalar ``s[i]``."""
    if x.ndim != 2 or s.shape != (x.shape[0],):
        raise ShapeError(f"rowscale: expected (M, C) and (M,), got {x.shape} and {s.shape}")
    xd, sd = x.data, s.data
    return _result(
        xd * sd[:, None],
        (x, s),
        lambda g: (g * sd[:, None], (g * xd).sum(axis=1)),
        "rowscale",
    )


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    need_a, need_b = a.requires_grad, b.requires_grad
    return _result(
        ad @ bd,
        (a, b),
        lambda g: (g @ bd.T if need_a else None, ad.T @ g if need_b else None),
        "matmul",
    )


# ---------------------------------------------------------------- reductions / structure


def tsum(a: Tensor, axis: int | None = None) -> Tensor:
    shape = a.shape
    if axis is None:
        return _result(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape),), "sum")
    axis = axis % a.ndim
    return _result(
        a.data.sum(axis=axis),
        (a,),
        lambda g: (np.broadcast_to(np.expand_dims(g, axis), shape),),
        "sum",
    )


def mean(a: Tensor) -> Tensor:
    return mul(tsum(a), 1.0 / a.data.size)


def tmax(a: Tensor, axis: int) -> Tensor:
    """Max along ``axis``; the adjoint routes to the first maximal entry."""
    axis = axis % a.ndim
    idx = np.argmax(a.data, axis=axis)
    out = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis).squeeze(axis)
    shape = a.shape

    def backward(g):
        full = np.zeros(shape)
        np.put_along_axis(full, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis)
        return (full,)

    return _result(out, (a,), backward, "max")


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    out = a.data.reshape(shape)
    return _result(out, (a,), lambda g: (g.reshape(old),), "reshape")


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    ndim = parts[0].ndim
    axis = axis % ndim
    for p in parts[1:]:
        if p.ndim != ndim or any(p.shape[d] != parts[0].shape[d] for d in range(ndim) if d != axis):
            raise ShapeError(f"concat: incompatible shapes {[q.shape for q in parts]}")
    splits = np.cumsum([p.shape[axis] for p in parts])[:-1]
    return _result(
        np.concatenate([p.data for p in parts], axis=axis),
        parts,
        lambda g: tuple(np.split(g, splits, axis=axis)),
        "concat",
    )


def gather_rows(x: Tensor, index) -> Tensor:
    """Select rows of ``x`` by an integer array of any shape; adjoint scatter-adds."""
    index = np.asarray(index, dtype=np.int64)
    n = x.shape[0]
    if index.size and (index.min() < 0 or index.max() >= n):
        raise IndexError(f"gather_rows: index out of range for {n} rows")
    shape = x.shape

    def backward(g):
        return (scatter_add_rows(g.reshape((-1,) + shape[1:]), index.reshape(-1), n),)

    return _result(x.data[index], (x,), backward, "gather")


def scatter_add_rows(rows: np.ndarray, index: np.ndarray, n: int) -> np.ndarray:
    """``out[index[j]] += rows[j]`` for an (M, ...) block, accumulated in order of ``j``."""
    tail = rows.shape[1:]
    width = int(np.prod(tail)) if tail else 1
    flat = (index[:, None] * width + np.arange(width)).reshape(-1)
    out = np.bincount(flat, weights=rows.reshape(-1), minlength=n * width)
    return out.reshape((n,) + tail)


# ---------------------------------------------------------------- probabilistic heads


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (a,), backward, "softmax")


def log_softmax_array(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy_mean(logits: Tensor, labels, ignore: int | None = -1) -> Tensor:
    """Mean negative log-likelihood over rows whose label is not ``ignore``."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy_mean: logits {logits.shape} vs labels {labels.shape}")
    m = logits.shape[1]
    keep = labels != ignore if ignore is not None else np.ones(labels.shape, bool)
    if not keep.any():
        raise ValueError("cross_entropy_mean: every label is ignored, loss is empty")
    kept = labels[keep]
    if kept.min() < 0 or kept.max() >= m:
        raise IndexError(f"cross_entropy_mean: labels must lie in [0, {m})")
    rows = np.flatnonzero(keep)
    logp = log_softmax_array(logits.data[rows])
    count = rows.size
    loss = -logp[np.arange(count), kept].sum() / count

    def backward(g):
        full = np.zeros(logits.shape)
        p = np.exp(logp)
        p[np.arange(count), kept] -= 1.0
        full[rows] = p * (g / count)
        return (full,)

    return _result(np.asarray(loss), (logits,), backward, "cross_entropy")


# ---------------------------------------------------------------- checkpoint I/O

_MAGIC = b"RFPNCKPT"
_VERSION = 1


def save_checkpoint(path, arrays: Mapping[str, np.ndarray]) -> None:
    """Write named float64 arrays to ``path`` in the little-endian checkpoint layout."""
    chunks = [_MAGIC, struct.pack("<II", _VERSION, len(arrays))]
    for name in sorted(arrays):
        value = np.asarray(arrays[name], dtype="<f8")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", value.ndim))
        chunks.append(struct.pack(f"<{value.ndim}Q", *value.shape))
        chunks.append(value.tobytes(order="C"))
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:8] != _MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    try:
        return _parse_checkpoint(buf, path)
    except (struct.error, UnicodeDecodeError) as exc:
        raise ValueError(f"{path}: truncated or corrupt checkpoint ({exc})") from None


def _parse_checkpoint(buf: bytes, path) -> dict[str, np.ndarray]:
    version, count = struct.unpack_from("<II", buf, 8)
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 16
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        name = buf[pos : pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}Q", buf, pos)
        pos += 8 * ndim
        size = int(np.prod(shape)) if ndim else 1
        if pos + 8 * size > len(buf):
            raise ValueError(f"{path}: entry {name!r} runs past the end of the file")
        out[name] = np.frombuffer(buf, dtype="<f8", count=size, offset=pos).reshape(shape).astype(DTYPE)
        pos += 8 * size
    if pos != len(buf):
        raise ValueError(f"{path}: trailing bytes after {count} entries")
    return out


def parameters_finite(params: Iterable[Tensor]) -> bool:
    return all(np.isfinite(p.data).all() for p in params)
