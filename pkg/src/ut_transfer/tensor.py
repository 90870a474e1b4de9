"""Dense tensors with reverse-mode automatic differentiation.

Only what the model zoo and the attacks need is provided: elementwise
arithmetic, matmul, 2-D convolution, pooling, a few reductions and the
cross-entropy loss. Broadcasting is limited to tensor-scalar arithmetic plus
the explicit ``add_bias`` and ``channel_affine`` primitives.

Gradients accumulate into ``Tensor.grad`` across repeated ``backward`` calls
until cleared with ``Tensor.zero_grad``.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterator, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "precision",
    "get_default_dtype",
    "no_grad",
    "is_grad_enabled",
    "graph_nodes",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "add_bias",
    "channel_affine",
    "conv2d",
    "relu",
    "max_pool2d",
    "global_avg_pool",
    "flatten",
    "reshape",
    "tensor_sum",
    "tensor_mean",
    "sign",
    "tensor_abs",
    "log_softmax",
    "softmax",
    "cross_entropy",
    "finite_difference_gradient",
    "per_example_fd_gradient",
]


class ShapeError(ValueError):
    """Operands of a primitive have incompatible shapes."""


class _State(threading.local):
    # per-thread so worker pools can mix no_grad and gradient work safely
    dtype = np.dtype(np.float32)
    grad_enabled = True


_state = _State()


def get_default_dtype() -> np.dtype:
    return _state.dtype


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily change the dtype used for new tensors and models.

    ``precision(np.float64)`` exists for gradient checking; training runs in
    32-bit. The setting is per thread.
    """
    previous = _state.dtype
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported precision {dt}")
    _state.dtype = dt
    try:
        yield
    finally:
        _state.dtype = previous


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block (current thread only)."""
    previous = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


def is_grad_enabled() -> bool:
    return _state.grad_enabled


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None, *, op: str = "leaf",
                 _parents: tuple = (), _backward: Callable | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype.kind == "f":
                dtype = data.dtype
            else:
                dtype = _state.dtype
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            raise TypeError(f"tensors hold real floats, got {arr.dtype}")
        if not np.isfinite(arr).all():
            raise FloatingPointError(f"non-finite values produced by {op}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.op = op
        self._parents = _parents
        self._backward = _backward

    # -- basic properties ---------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item: tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, op="detach")

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # -- operators ----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(scale(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor / tensor is not supported")
        return scale(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return tensor_sum(self)

    def mean(self):
        return tensor_mean(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    # -- differentiation ----------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        """Populate ``grad`` on every leaf that requires it.

        Only scalar outputs may be differentiated without an explicit seed.
        """
        if not self.requires_grad:
            raise RuntimeError("backward: output is not connected to any leaf requiring grad")
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward: output of shape {self.shape} is not a scalar")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.dtype)
            if grad.shape != self.shape:
                raise ShapeError(f"backward: seed {grad.shape} vs output {self.shape}")
        order = graph_nodes(self)
        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    if not np.isfinite(g).all():
                        raise FloatingPointError("non-finite gradient reached a leaf")
                    node.grad = g.copy() if node.grad is None else node.grad + g
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


def graph_nodes(root: Tensor) -> list[Tensor]:
    """Topologically ordered nodes reachable from ``root`` (inputs first).

    The returned list is the computation record used by ``backward``.
    """
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: tuple, backward: Callable, op: str) -> Tensor:
    track = _state.grad_enabled and any(p.requires_grad for p in parents)
    if track:
        return Tensor(data, requires_grad=True, op=op, _parents=parents, _backward=backward)
    return Tensor(data, op=op)


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ (no broadcasting)")


# -- elementwise ------------------------------------------------------------

def add(a, b) -> Tensor:
    a = _as_tensor(a)
    if not isinstance(b, Tensor):
        c = float(b)
        return _result(a.data + a.dtype.type(c), (a,), lambda g: (g,), "add_scalar")
    _same_shape("add", a, b)
    return _result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    a = _as_tensor(a)
    if not isinstance(b, Tensor):
        c = float(b)
        return _result(a.data - a.dtype.type(c), (a,), lambda g: (g,), "sub_scalar")
    _same_shape("sub", a, b)
    return _result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    if not isinstance(b, Tensor):
        return scale(a, b)
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(a, c: float) -> Tensor:
    a = _as_tensor(a)
    c = a.dtype.type(float(c))
    return _result(a.data * c, (a,), lambda g: (g * c,), "scale")


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    return _result(np.where(mask, a.data, a.dtype.type(0)), (a,), lambda g: (g * mask,), "relu")


def sign(a) -> Tensor:
    """Elementwise sign with sign(0) = 0; its derivative is zero everywhere."""
    a = _as_tensor(a)
    return _result(np.sign(a.data), (a,), lambda g: (np.zeros_like(g),), "sign")


def tensor_abs(a) -> Tensor:
    a = _as_tensor(a)
    s = np.sign(a.data)
    return _result(np.abs(a.data), (a,), lambda g: (g * s,), "abs")


# -- linear algebra -----------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    ad, bd = a.data, b.data

    def backward(g):
        return (g @ bd.T if a.requires_grad else None,
                ad.T @ g if b.requires_grad else None)

    return _result(ad @ bd, (a, b), backward, "matmul")


def add_bias(x, b) -> Tensor:
    """Add a per-feature bias along axis 1 (rows of a matrix, channels of an image batch)."""
    x, b = _as_tensor(x), _as_tensor(b)
    if x.ndim < 2 or b.ndim != 1 or x.shape[1] != b.shape[0]:
        raise ShapeError(f"add_bias: input {x.shape} and bias {b.shape} do not conform")
    view = (1, -1) + (1,) * (x.ndim - 2)
    axes = (0,) + tuple(range(2, x.ndim))
    return _result(x.data + b.data.reshape(view), (x, b),
                   lambda g: (g, g.sum(axis=axes)), "add_bias")


def channel_affine(x, scale_, shift) -> Tensor:
    """Per-channel ``x * scale + shift`` over axis 1."""
    x, scale_, shift = _as_tensor(x), _as_tensor(scale_), _as_tensor(shift)
    c = x.shape[1] if x.ndim >= 2 else -1
    if scale_.shape != (c,) or shift.shape != (c,):
        raise ShapeError(f"channel_affine: input {x.shape}, scale {scale_.shape}, shift {shift.shape}")
    view = (1, -1) + (1,) * (x.ndim - 2)
    axes = (0,) + tuple(range(2, x.ndim))
    sd = scale_.data.reshape(view)
    xd = x.data

    def backward(g):
        return (g * sd,
                (g * xd).sum(axis=axes) if scale_.requires_grad else None,
                g.sum(axis=axes) if shift.requires_grad else None)

    return _result(xd * sd + shift.data.reshape(view), (x, scale_, shift), backward, "channel_affine")


def conv2d(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of an (N, C, H, W) batch with (F, C, kh, kw) filters."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: input {x.shape} and kernel {w.shape} must both be rank 4")
    n, c, h, wd = x.shape
    f, cw, kh, kw = w.shape
    if c != cw:
        raise ShapeError(f"conv2d: input {x.shape} has {c} channels, kernel {w.shape} expects {cw}")
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d: bad stride {stride} / padding {padding}")
    hp, wp = h + 2 * padding, wd + 2 * padding
    if hp < kh or wp < kw:
        raise ShapeError(f"conv2d: kernel {w.shape} larger than padded input {x.shape}")
    ho, wo = (hp - kh) // stride + 1, (wp - kw) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride][:, :, :ho, :wo]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    wmat = w.data.reshape(f, -1)
    out = cols @ wmat.T
    if b is not None:
        b = _as_tensor(b)
        if b.shape != (f,):
            raise ShapeError(f"conv2d: bias {b.shape} does not match {f} filters")
        out += b.data
    out = out.reshape(n, ho, wo, f).transpose(0, 3, 1, 2)
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, f)
        gw = (g2.T @ cols).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(n, ho, wo, c, kh, kw)
            dxp = np.zeros((n, c, hp, wp), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = dxp[:, :, padding:padding + h, padding:padding + wd] if padding else dxp
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _result(np.ascontiguousarray(out), parents, backward, "conv2d")


# -- pooling and reshaping ----------------------------------------------------

def max_pool2d(x, k: int = 2) -> Tensor:
    """Non-overlapping k x k max pooling; trailing rows/columns are dropped."""
    x = _as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"max_pool2d: expected rank-4 input, got {x.shape}")
    n, c, h, w = x.shape
    ho, wo = h // k, w // k
    if ho == 0 or wo == 0:
        raise ShapeError(f"max_pool2d: window {k} larger than input {x.shape}")
    blocks = x.data[:, :, :ho * k, :wo * k].reshape(n, c, ho, k, wo, k)
    blocks = blocks.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, k * k)
    idx = blocks.argmax(axis=-1)[..., None]
    out = np.take_along_axis(blocks, idx, axis=-1)[..., 0]

    def backward(g):
        gb = np.zeros((n, c, ho, wo, k * k), dtype=g.dtype)
        np.put_along_axis(gb, idx, g[..., None], axis=-1)
        gb = gb.reshape(n, c, ho, wo, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho * k, wo * k)
        if ho * k == h and wo * k == w:
            return (gb,)
        gx = np.zeros(x.shape, dtype=g.dtype)
        gx[:, :, :ho * k, :wo * k] = gb
        return (gx,)

    return _result(out, (x,), backward, "max_pool2d")


def global_avg_pool(x) -> Tensor:
    x = _as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool: expected rank-4 input, got {x.shape}")
    n, c, h, w = x.shape
    inv = x.dtype.type(1.0 / (h * w))
    return _result(x.data.mean(axis=(2, 3)), (x,),
                   lambda g: (np.broadcast_to(g[:, :, None, None] * inv, x.shape).copy(),),
                   "global_avg_pool")


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = _as_tensor(x)
    shape = tuple(int(s) for s in shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}") from None
    return _result(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def flatten(x) -> Tensor:
    """Collapse all but the leading (batch) axis."""
    x = _as_tensor(x)
    return reshape(x, (x.shape[0], -1))


# -- reductions -------------------------------------------------------------

def tensor_sum(x) -> Tensor:
    x = _as_tensor(x)
    return _result(np.asarray(x.data.sum()), (x,),
                   lambda g: (np.full(x.shape, g, dtype=x.dtype),), "sum")


def tensor_mean(x) -> Tensor:
    x = _as_tensor(x)
    n = x.data.size
    return _result(np.asarray(x.data.mean()), (x,),
                   lambda g: (np.full(x.shape, g / n, dtype=x.dtype),), "mean")


# -- softmax family -----------------------------------------------------------

def _log_softmax_rows(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def log_softmax(logits) -> Tensor:
    logits = _as_tensor(logits)
    if logits.ndim != 2:
        raise ShapeError(f"log_softmax: expected [batch x classes], got {logits.shape}")
    out = _log_softmax_rows(logits.data)
    p = np.exp(out)
    return _result(out, (logits,),
                   lambda g: (g - p * g.sum(axis=1, keepdims=True),), "log_softmax")


def softmax(logits) -> Tensor:
    logits = _as_tensor(logits)
    if logits.ndim != 2:
        raise ShapeError(f"softmax: expected [batch x classes], got {logits.shape}")
    p = np.exp(_log_softmax_rows(logits.data))
    return _result(p, (logits,),
                   lambda g: (p * (g - (g * p).sum(axis=1, keepdims=True)),), "softmax")


def cross_entropy(logits, labels, reduction: str = "mean") -> Tensor:
    """Cross-entropy of integer ``labels`` under ``softmax(logits)``.

    ``reduction="sum"`` keeps each example's gradient equal to the gradient
    of its own loss, which is what input-space attacks need.
    """
    logits = _as_tensor(logits)
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy: expected [batch x classes], got {logits.shape}")
    n, k = logits.shape
    if n < 1:
        raise ShapeError("cross_entropy: empty batch")
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ShapeError(f"cross_entropy: {labels.shape} labels for {n} rows")
    if labels.dtype.kind not in "iu":
        raise TypeError(f"cross_entropy: labels must be integers, got {labels.dtype}")
    bad = np.flatnonzero((labels < 0) | (labels >= k))
    if bad.size:
        i = int(bad[0])
        raise IndexError(f"cross_entropy: label {int(labels[i])} at index {i} outside [0, {k})")
    if reduction not in ("mean", "sum"):
        raise ValueError(f"unknown reduction {reduction!r}")
    logp = _log_softmax_rows(logits.data)
    rows = np.arange(n)
    picked = -logp[rows, labels]
    loss = picked.mean() if reduction == "mean" else picked.sum()
    factor = logits.dtype.type(1.0 / n if reduction == "mean" else 1.0)

    def backward(g):
        d = np.exp(logp)
        d[rows, labels] -= 1
        return (d * (g * factor),)

    return _result(np.asarray(loss, dtype=logits.dtype), (logits,), backward, "cross_entropy")


# -- finite differences -----------------------------------------------------

def _scalar_value(v) -> float:
    if isinstance(v, Tensor):
        v = v.data
    v = float(np.asarray(v).reshape(()))
    return v


def finite_difference_gradient(f: Callable, x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function, one coordinate at a time."""
    if not h > 0:
        raise ValueError(f"finite difference step must be positive, got {h}")
    src = np.asarray(x.data if isinstance(x, Tensor) else x)
    base = src.astype(src.dtype if src.dtype.kind == "f" else np.float64, copy=True)
    grad = np.zeros(base.shape, dtype=np.float64)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = _scalar_value(f(base.copy()))
        flat[i] = orig - h
        down = _scalar_value(f(base.copy()))
        flat[i] = orig
        if not (np.isfinite(up) and np.isfinite(down)):
            raise FloatingPointError(f"non-finite function value at coordinate {i}")
        gflat[i] = (up - down) / (2 * h)
    return grad.astype(base.dtype, copy=False)


def per_example_fd_gradient(f: Callable, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences for a function returning one loss per example.

    ``f`` maps an (N, ...) batch to an (N,) vector where entry ``i`` depends
    only on example ``i``; each coordinate is perturbed in all examples at
    once.
    """
    if not h > 0:
        raise ValueError(f"finite difference step must be positive, got {h}")
    base = np.array(x, copy=True)
    n = base.shape[0]
    grad = np.zeros(base.shape, dtype=np.float64)
    flat = base.reshape(n, -1)
    gflat = grad.reshape(n, -1)
    for j in range(flat.shape[1]):
        orig = flat[:, j].copy()
        flat[:, j] = orig + h
        up = np.asarray(f(base.copy()), dtype=np.float64)
        flat[:, j] = orig - h
        down = np.asarray(f(base.copy()), dtype=np.float64)
        flat[:, j] = orig
        if not (np.isfinite(up).all() and np.isfinite(down).all()):
            raise FloatingPointError(f"non-finite function value at coordinate {j}")
        gflat[:, j] = (up - down) / (2 * h)
    return grad.astype(base.dtype, copy=False)
