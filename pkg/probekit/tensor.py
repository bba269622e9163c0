"""Dense tensors, a seedable generator, and differentiable primitives.

Highlights
----------
- ``Tensor``: read-only numpy storage (float32 by default) with a reverse-mode
  tape: every op records its parents and a closure that pushes the incoming
  gradient back to them.
- ``Rng``: splitmix64 stream, vectorized over numpy uint64, with Box-Muller
  normals (two uniforms per variate).
- Ops: matmul, add_bias, leaky_relu/relu, conv2d, maxpool2d, flatten, concat,
  add/scale/sum_all, cross_entropy.
- ``softmax_cross_entropy`` returns ``(loss, grad_logits)`` directly; the
  ``cross_entropy`` op wraps it so the fused gradient is used in backward.
- ``grad_check`` compares analytic and central-difference gradients in float64.
"""

import math
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .exceptions import DimensionError, InputError, NumericError

ArrayLike = Union[np.ndarray, Sequence, float, int]

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB


def _splitmix_scalar(z: int) -> int:
    z = (z + _GOLDEN) & _MASK64
    z = ((z ^ (z >> 30)) * _MIX1) & _MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & _MASK64
    return z ^ (z >> 31)


class Rng:
    """Deterministic splitmix64 generator.

    The stream depends only on the seed: output ``i`` (1-based) is the
    splitmix64 finalizer applied to ``seed + i * 0x9E3779B97F4A7C15 mod 2**64``.
    Uniforms take the top 53 bits; normals use Box-Muller on consecutive pairs
    and keep the cosine branch only.

    Not safe to share between threads.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        self.state = self.seed

    def derive(self, *keys: int) -> "Rng":
        """Independent stream for ``keys`` (e.g. a run index)."""
        z = self.seed
        for key in keys:
            z = _splitmix_scalar(z ^ ((int(key) + 1) * _GOLDEN & _MASK64))
        return Rng(z)

    def next_u64(self, n: int) -> np.ndarray:
        steps = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(self.state) + steps * np.uint64(_GOLDEN)
            z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
            z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
            z = z ^ (z >> np.uint64(31))
        self.state = (self.state + n * _GOLDEN) & _MASK64
        return z

    def uniform(self, n: int) -> np.ndarray:
        """``n`` float64 values in [0, 1)."""
        return (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * (2.0**-53)

    def normal(self, shape: Union[int, Tuple[int, ...]], std: float = 1.0) -> np.ndarray:
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        n = int(np.prod(shape, dtype=np.int64))
        u = self.uniform(2 * n)
        u1 = 1.0 - u[0::2]
        u2 = u[1::2]
        z = np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * math.pi * u2)
        return (z * std).reshape(shape)

    def integers(self, high: int, n: int) -> np.ndarray:
        return np.floor(self.uniform(n) * high).astype(np.int64)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniform(n), kind="stable")

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed:#x}, state={self.state:#x})"


class Tensor:
    """Immutable dense array plus the bookkeeping for reverse-mode gradients.

    Parameters
    ----------
    data : array-like
        Copied into a read-only numpy array.
    requires_grad : bool, default False
        Leaves with ``requires_grad`` collect ``.grad`` after ``backward()``.
    dtype : numpy dtype, default float32
        float64 is used by ``grad_check`` only.
    """

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        *,
        dtype=np.float32,
        name: str = "",
    ):
        arr = np.array(data, dtype=dtype)
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._prev: Tuple["Tensor", ...] = ()
        self._backward: Callable[[], None] = lambda: None
        self._op = ""

    @classmethod
    def _result(cls, arr: np.ndarray, prev: Sequence["Tensor"], op: str) -> "Tensor":
        out = cls.__new__(cls)
        arr.setflags(write=False)
        out.data = arr
        out.requires_grad = any(p.requires_grad for p in prev)
        out.grad = None
        out.name = ""
        out._prev = tuple(prev) if out.requires_grad else ()
        out._backward = lambda: None
        out._op = op
        return out

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        """Same values, no gradient path (the probe barrier)."""
        return Tensor._result(self.data, (), "detach")

    def trainable(self) -> "Tensor":
        """Fresh gradient-collecting leaf sharing this tensor's storage."""
        leaf = Tensor._result(self.data, (), "leaf")
        leaf.requires_grad = True
        leaf.name = self.name
        return leaf

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        # iterative DFS: 128-layer graphs are deeper than the recursion limit
        topo: List[Tensor] = []
        visited = set()
        stack: List[Tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._prev:
                if id(parent) not in visited:
                    stack.append((parent, False))

        self.grad = (
            np.ones_like(self.data) if grad is None else np.asarray(grad, self.data.dtype)
        )
        for node in reversed(topo):
            if node.grad is not None:
                node._backward()

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{label})"


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    g = g.astype(t.data.dtype, copy=False)
    t.grad = g.copy() if t.grad is None else t.grad + g


def _as_tensor(x: Union[Tensor, ArrayLike]) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------- Linear algebra ----------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    out = Tensor._result(a.data @ b.data, (a, b), "matmul")

    def _backward():
        _accumulate(a, out.grad @ b.data.T)
        _accumulate(b, a.data.T @ out.grad)

    out._backward = _backward
    return out


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    if x.ndim != 2 or bias.shape != (x.shape[1],):
        raise DimensionError(f"add_bias: bias {bias.shape} does not fit {x.shape}")
    out = Tensor._result(x.data + bias.data, (x, bias), "add_bias")

    def _backward():
        _accumulate(x, out.grad)
        _accumulate(bias, out.grad.sum(axis=0))

    out._backward = _backward
    return out


def flatten(x: Tensor) -> Tensor:
    """Collapse every axis after the batch axis."""
    if x.ndim == 2:
        return x
    out = Tensor._result(x.data.reshape(x.shape[0], -1), (x,), "flatten")

    def _backward():
        _accumulate(x, out.grad.reshape(x.shape))

    out._backward = _backward
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} differ")
    out = Tensor._result(a.data + b.data, (a, b), "add")

    def _backward():
        _accumulate(a, out.grad)
        _accumulate(b, out.grad)

    out._backward = _backward
    return out


def scale(x: Tensor, factor: float) -> Tensor:
    out = Tensor._result(x.data * x.data.dtype.type(factor), (x,), "scale")

    def _backward():
        _accumulate(x, out.grad * factor)

    out._backward = _backward
    return out


def sum_all(x: Tensor) -> Tensor:
    out = Tensor._result(np.asarray(x.data.sum(), dtype=x.data.dtype), (x,), "sum")

    def _backward():
        _accumulate(x, np.broadcast_to(out.grad, x.shape))

    out._backward = _backward
    return out


# ---------- Activations ----------
def leaky_relu(x: Tensor, alpha: float) -> Tensor:
    """x if x > 0 else alpha * x; the derivative at 0 is alpha."""
    if not 0.0 <= alpha <= 1.0:
        raise InputError(f"leaky_relu: alpha must be in [0, 1], got {alpha}")
    x = _as_tensor(x)
    positive = x.data > 0
    slope = np.where(positive, 1.0, alpha).astype(x.data.dtype)
    out = Tensor._result(x.data * slope, (x,), "leaky_relu")

    def _backward():
        _accumulate(x, out.grad * slope)

    out._backward = _backward
    return out


def relu(x: Tensor) -> Tensor:
    return leaky_relu(x, 0.0)


# ---------- Convolution & pooling (NHWC) ----------
def _same_padding(size: int, k: int, stride: int) -> Tuple[int, int, int]:
    out = -(-size // stride)
    total = max((out - 1) * stride + k - size, 0)
    return out, total // 2, total - total // 2


def conv2d(
    x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, padding: str = "same"
) -> Tensor:
    """Cross-correlation of an NHWC batch with a kh×kw×cin×cout kernel, plus bias."""
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(f"conv2d: expected 4-d input and kernel, got {x.shape} and {kernel.shape}")
    batch, h, w, cin = x.shape
    kh, kw, kcin, cout = kernel.shape
    if kcin != cin:
        raise DimensionError(f"conv2d: input {x.shape} has {cin} channels, kernel {kernel.shape} expects {kcin}")
    if bias.shape != (cout,):
        raise DimensionError(f"conv2d: bias {bias.shape} does not match kernel {kernel.shape}")
    if stride < 1:
        raise InputError(f"conv2d: stride must be >= 1, got {stride}")

    if padding == "same":
        oh, top, bottom = _same_padding(h, kh, stride)
        ow, left, right = _same_padding(w, kw, stride)
    elif padding == "valid":
        top = bottom = left = right = 0
        if kh > h or kw > w:
            raise DimensionError(f"conv2d: kernel {kernel.shape} larger than input {x.shape}")
        oh, ow = (h - kh) // stride + 1, (w - kw) // stride + 1
    else:
        raise InputError(f"conv2d: padding must be 'same' or 'valid', got {padding!r}")

    xp = np.pad(x.data, ((0, 0), (top, bottom), (left, right), (0, 0)))
    # (batch, oh, ow, cin, kh, kw) -> rows of kh*kw*cin in kernel order
    windows = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride][:, :oh, :ow]
    cols = windows.transpose(0, 1, 2, 4, 5, 3).reshape(batch * oh * ow, kh * kw * cin)
    kmat = kernel.data.reshape(kh * kw * cin, cout)
    res = (cols @ kmat + bias.data).reshape(batch, oh, ow, cout)
    out = Tensor._result(res, (x, kernel, bias), "conv2d")

    def _backward():
        g = out.grad.reshape(batch * oh * ow, cout)
        _accumulate(kernel, (cols.T @ g).reshape(kernel.shape))
        _accumulate(bias, g.sum(axis=0))
        if not x.requires_grad:
            return
        gcols = (g @ kmat.T).reshape(batch, oh, ow, kh, kw, cin)
        gxp = np.zeros(xp.shape, dtype=xp.dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[:, i : i + stride * (oh - 1) + 1 : stride, j : j + stride * (ow - 1) + 1 : stride, :] += gcols[:, :, :, i, j, :]
        _accumulate(x, gxp[:, top : top + h, left : left + w, :])

    out._backward = _backward
    return out


def maxpool2d(x: Tensor, window: int, stride: int) -> Tensor:
    """Per-window maximum; ties go to the lowest row-major index in the window."""
    if window < 1 or stride < 1:
        raise InputError(f"maxpool2d: window and stride must be >= 1, got {window}, {stride}")
    if x.ndim != 4:
        raise DimensionError(f"maxpool2d: expected NHWC input, got {x.shape}")
    batch, h, w, c = x.shape
    if window > h or window > w:
        raise DimensionError(f"maxpool2d: window {window} exceeds input {x.shape}")
    oh, ow = (h - window) // stride + 1, (w - window) // stride + 1

    windows = sliding_window_view(x.data, (window, window), axis=(1, 2))[:, ::stride, ::stride][:, :oh, :ow]
    flat = windows.reshape(batch, oh, ow, c, window * window)
    arg = flat.argmax(axis=-1)
    res = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    out = Tensor._result(np.ascontiguousarray(res), (x,), "maxpool2d")

    def _backward():
        gx = np.zeros(x.shape, dtype=x.data.dtype)
        bi, ri, ci, chi = np.indices((batch, oh, ow, c))
        rows = ri * stride + arg // window
        cols = ci * stride + arg % window
        np.add.at(gx, (bi, rows, cols, chi), out.grad)
        _accumulate(x, gx)

    out._backward = _backward
    return out


def concat(a: Tensor, b: Tensor, axis: int) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != b.ndim or not 0 <= axis < a.ndim:
        raise DimensionError(f"concat: cannot join {a.shape} and {b.shape} on axis {axis}")
    for k, (da, db) in enumerate(zip(a.shape, b.shape)):
        if k != axis and da != db:
            raise DimensionError(f"concat: {a.shape} and {b.shape} differ off axis {axis}")
    seam = a.shape[axis]
    out = Tensor._result(np.concatenate([a.data, b.data], axis=axis), (a, b), "concat")

    def _backward():
        ga, gb = np.split(out.grad, [seam], axis=axis)
        _accumulate(a, ga)
        _accumulate(b, gb)

    out._backward = _backward
    return out


# ---------- Loss ----------
def _check_one_hot(labels: np.ndarray, shape: Tuple[int, ...]) -> None:
    if len(shape) != 2 or shape[1] == 0:
        raise InputError(f"softmax_cross_entropy: logits must be batch×d with d > 0, got {shape}")
    if labels.shape != shape:
        raise InputError(f"softmax_cross_entropy: labels {labels.shape} do not match logits {shape}")
    binary = np.all((labels == 0) | (labels == 1))
    if not binary or np.any(labels.sum(axis=1) != 1):
        raise InputError("softmax_cross_entropy: every label row must be one-hot")


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    exps = np.exp(shifted)
    return exps / exps.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(
    logits: Union[Tensor, np.ndarray], labels: np.ndarray
) -> Tuple[float, np.ndarray]:
    """Mean cross-entropy of softmax(logits) and its gradient (softmax - label)/batch."""
    z = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    labels = np.asarray(labels)
    _check_one_hot(labels, z.shape)
    z64 = z.astype(np.float64)
    shifted = z64 - z64.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    batch = z.shape[0]
    loss = float(np.mean(lse - (shifted * labels).sum(axis=1)))
    probs = np.exp(shifted - lse[:, None])
    grad = ((probs - labels) / batch).astype(z.dtype)
    return loss, grad


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    loss, grad = softmax_cross_entropy(logits, labels)
    out = Tensor._result(np.asarray(loss, dtype=logits.data.dtype), (logits,), "cross_entropy")

    def _backward():
        _accumulate(logits, grad * out.grad)

    out._backward = _backward
    return out


# ---------- Gradient checking ----------
def grad_check(
    op: Callable[..., Tensor], point: Sequence[ArrayLike], eps: float = 1e-3
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``op`` receives one float64 Tensor per entry of ``point``; a non-scalar
    result is sum-reduced. The error per element is
    ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    if eps <= 0:
        raise InputError(f"grad_check: eps must be > 0, got {eps}")
    base = [np.array(p, dtype=np.float64) for p in point]

    def evaluate(arrays: Sequence[np.ndarray]) -> float:
        out = op(*[Tensor(a, dtype=np.float64) for a in arrays])
        value = float(out.data.sum())
        if not math.isfinite(value):
            raise NumericError("grad_check: op produced a non-finite value")
        return value

    leaves = [Tensor(a, requires_grad=True, dtype=np.float64) for a in base]
    out = op(*leaves)
    if not np.all(np.isfinite(out.data)):
        raise NumericError("grad_check: op produced a non-finite value")
    sum_all(out).backward()

    worst = 0.0
    for k, leaf in enumerate(leaves):
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(base[k])
        for idx in np.ndindex(*base[k].shape):
            plus = [a.copy() for a in base]
            minus = [a.copy() for a in base]
            plus[k][idx] += eps
            minus[k][idx] -= eps
            numeric = (evaluate(plus) - evaluate(minus)) / (2 * eps)
            a = float(analytic[idx])
            denom = max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, abs(a - numeric) / denom)
    return worst
