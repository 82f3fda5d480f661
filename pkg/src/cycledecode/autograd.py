"""Dense-tensor math with reverse-mode automatic differentiation.

Tensors wrap numpy arrays (float32 by default, float64 selectable for
gradient checking). Every op records its parents and a backward closure;
``backward`` replays the graph in reverse topological order. No graph is
reused across steps.
"""

from __future__ import annotations

import contextlib
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericError

# Additive attention-mask value: large enough that exp() underflows to 0
# in float32 and float64, small enough to stay finite in float32.
MASK_VALUE = -1e30

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference / evaluation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """A dense array plus optional gradient buffer and graph linkage."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data: np.ndarray = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        # Copy on first touch: closures may pass views of shared buffers.
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype)
        else:
            self.grad += g

    def _accumulate_owned(self, g: np.ndarray) -> None:
        # For freshly computed arrays only: safe to adopt without copying.
        if self.grad is None:
            self.grad = g
        else:
            self.grad += g

    def backward(self) -> None:
        """Accumulate gradients into every requires_grad ancestor.

        The loss must be a scalar (a single element); anything else is a
        contract violation, not a numeric event.
        """
        if self.data.size != 1:
            raise ContractError(
                f"backward() requires a scalar loss, got shape {self.shape}"
            )
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # Operator sugar. The right operand may be a Tensor, array, or scalar.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, mul(_as_tensor(other, like=self), -1.0))

    def __neg__(self):
        return mul(self, -1.0)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def _as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _pair(a, b) -> tuple[Tensor, Tensor]:
    """Coerce operands to Tensors without widening the float dtype."""
    if isinstance(a, Tensor):
        return a, _as_tensor(b, like=a)
    if isinstance(b, Tensor):
        return _as_tensor(a, like=b), b
    return _as_tensor(a), _as_tensor(b)


def _make(
    data: np.ndarray, parents: Sequence[Tensor], backward_fn
) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.data.shape))

    return _make(data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate_owned(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate_owned(_unbroadcast(g * a.data, b.data.shape))

    return _make(data, (a, b), backward)


def matmul(a, b) -> Tensor:
    """Matrix product on the trailing two axes; leading axes broadcast."""
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(
            f"matmul requires ndim >= 2 operands, got {a.shape} @ {b.shape}"
        )
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(
            f"matmul inner dimensions disagree: {a.shape} @ {b.shape}"
        )

    if b.ndim == 2 and a.ndim > 2:
        # Weight-projection fast path: fold leading axes into one GEMM.
        lead = a.shape[:-1]
        a2 = a.data.reshape(-1, a.shape[-1])
        data = (a2 @ b.data).reshape(lead + (b.shape[-1],))

        def backward(g):
            g2 = g.reshape(-1, g.shape[-1])
            if a.requires_grad:
                a._accumulate_owned((g2 @ b.data.T).reshape(a.data.shape))
            if b.requires_grad:
                b._accumulate_owned(a2.T @ g2)

        return _make(data, (a, b), backward)

    data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            a._accumulate_owned(_unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            b._accumulate_owned(_unbroadcast(gb, b.data.shape))

    return _make(data, (a, b), backward)


def reshape(a: Tensor, shape: tuple) -> Tensor:
    a = _as_tensor(a)
    data = a.data.reshape(shape)

    def backward(g):
        a._accumulate(g.reshape(a.data.shape))

    return _make(data, (a,), backward)


def transpose(a: Tensor, axes: tuple) -> Tensor:
    a = _as_tensor(a)
    data = a.data.transpose(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        a._accumulate(g.transpose(inverse))

    return _make(data, (a,), backward)


def concat(tensors: Iterable[Tensor], axis: int) -> Tensor:
    parts = [_as_tensor(t) for t in tensors]
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for part, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if part.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                part._accumulate(g[tuple(idx)])

    return _make(data, tuple(parts), backward)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate_owned(np.broadcast_to(g, a.data.shape).copy())

    return _make(data, (a,), backward)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    count = a.data.size if axis is None else a.data.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def softmax(x, axis: int = -1) -> Tensor:
    """Numerically stabilized softmax; rejects non-finite input."""
    x = _as_tensor(x)
    if not np.all(np.isfinite(x.data)):
        raise NumericError("softmax input contains non-finite values")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        x._accumulate_owned(y * (g - dot))

    return _make(y, (x,), backward)


def silu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    sig = 1.0 / (1.0 + np.exp(-x.data))
    y = x.data * sig

    def backward(g):
        x._accumulate_owned(g * sig * (1.0 + x.data * (1.0 - sig)))

    return _make(y, (x,), backward)


def rms_norm(x, gain, eps: float = 1e-5) -> Tensor:
    """Scale rows to unit root-mean-square, then apply an elementwise gain."""
    x = _as_tensor(x)
    gain = _as_tensor(gain, like=x)
    d = x.data.shape[-1]
    if gain.data.shape != (d,):
        raise DimensionError(
            f"rms_norm gain shape {gain.data.shape} does not match trailing dim {d}"
        )
    ms = np.mean(np.square(x.data), axis=-1, keepdims=True)
    r = 1.0 / np.sqrt(ms + eps)
    normed = x.data * r
    y = normed * gain.data

    def backward(g):
        if x.requires_grad:
            gg = g * gain.data
            s = (gg * x.data).sum(axis=-1, keepdims=True)
            x._accumulate_owned(r * gg - x.data * (s * r**3 / d))
        if gain.requires_grad:
            gain._accumulate_owned((g * normed).reshape(-1, d).sum(axis=0))

    return _make(y, (x, gain), backward)


def rope(x: Tensor, positions: np.ndarray, base: float) -> Tensor:
    """Rotary position encoding over the trailing (position, channel) axes.

    ``x`` has shape [..., n, hd] with even hd; ``positions`` gives the
    absolute position of each of the n rows.
    """
    x = _as_tensor(x)
    hd = x.data.shape[-1]
    n = x.data.shape[-2]
    if hd % 2 != 0:
        raise DimensionError(f"rope requires an even head dim, got {hd}")
    positions = np.asarray(positions)
    if positions.shape != (n,):
        raise DimensionError(
            f"rope positions length {positions.shape} does not match axis size {n}"
        )
    half = hd // 2
    inv = base ** (-np.arange(half, dtype=np.float64) * 2.0 / hd)
    ang = positions[:, None].astype(np.float64) * inv[None, :]
    cos = np.concatenate([np.cos(ang), np.cos(ang)], axis=-1).astype(x.data.dtype)
    sin = np.concatenate([np.sin(ang), np.sin(ang)], axis=-1).astype(x.data.dtype)

    def rotate(v):
        return np.concatenate([-v[..., half:], v[..., :half]], axis=-1)

    y = x.data * cos + rotate(x.data) * sin

    def backward(g):
        gs = g * sin
        # adjoint of rotate: (g1, g2) -> (g2, -g1)
        x._accumulate_owned(g * cos + np.concatenate([gs[..., half:], -gs[..., :half]], axis=-1))

    return _make(y, (x,), backward)


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup ``table[ids]`` with scatter-add backward."""
    table = _as_tensor(table)
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise DimensionError("embedding ids must be integers")
    vocab = table.data.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise IndexError(
            f"embedding id out of range [0, {vocab}): min={ids.min()}, max={ids.max()}"
        )
    data = table.data[ids]

    def backward(g):
        acc = np.zeros_like(table.data)
        np.add.at(acc, ids, g)
        table._accumulate_owned(acc)

    return _make(data, (table,), backward)


def cross_entropy(logits, targets, ignore_mask=None) -> Tensor:
    """Mean negative log-softmax probability of targets.

    ``logits`` is [n, V] (leading batch axes are flattened), ``targets``
    holds token ids, and positions where ``ignore_mask`` is True are
    dropped from the mean. With every position ignored the loss is
    defined as 0 and contributes zero gradient.
    """
    logits = _as_tensor(logits)
    vocab = logits.data.shape[-1]
    flat = logits.data.reshape(-1, vocab)
    targets = np.asarray(targets).reshape(-1)
    if targets.shape[0] != flat.shape[0]:
        raise DimensionError(
            f"cross_entropy got {flat.shape[0]} rows but {targets.shape[0]} targets"
        )
    if targets.size and (targets.min() < 0 or targets.max() >= vocab):
        raise IndexError(
            f"cross_entropy target out of vocab [0, {vocab}): "
            f"min={targets.min()}, max={targets.max()}"
        )
    if ignore_mask is None:
        keep = np.ones(flat.shape[0], dtype=bool)
    else:
        keep = ~np.asarray(ignore_mask, dtype=bool).reshape(-1)
        if keep.shape[0] != flat.shape[0]:
            raise DimensionError("ignore_mask length does not match positions")
    count = int(keep.sum())

    m = flat.max(axis=-1, keepdims=True)
    e = np.exp(flat - m)
    z = e.sum(axis=-1, keepdims=True)
    log_probs = (flat - m) - np.log(z)
    rows = np.arange(flat.shape[0])
    nll = -log_probs[rows, targets]
    value = nll[keep].sum() / count if count else 0.0
    data = np.asarray(value, dtype=logits.data.dtype)

    def backward(g):
        if count == 0:
            logits._accumulate_owned(np.zeros_like(logits.data))
            return
        probs = e / z
        grad = probs
        grad[rows, targets] -= 1.0
        grad *= (keep * (float(g) / count))[:, None]
        logits._accumulate_owned(grad.reshape(logits.data.shape).astype(logits.data.dtype))

    return _make(data, (logits,), backward)
