"""Numerical self-test for the differentiable primitives.

Two kinds of checks: central-difference gradient checks (max relative error)
and comparisons of conv2d / maxpool2d against straightforward loop
implementations over a grid of small shapes (max absolute difference).
"""

import logging
from typing import Callable, List, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict

from .tensor import (
    Rng,
    Tensor,
    _same_padding,
    add_bias,
    concat,
    conv2d,
    cross_entropy,
    flatten,
    grad_check,
    leaky_relu,
    matmul,
    maxpool2d,
    scale,
)

logger = logging.getLogger(__name__)

GRADIENT_THRESHOLD = 1e-3
KINK_THRESHOLD = 1e-4
LINEAR_THRESHOLD = 1e-7
ORACLE_THRESHOLD = 1e-5


class CheckResult(BaseModel):
    name: str
    kind: str
    value: float
    threshold: float
    model_config = ConfigDict(from_attributes=True, frozen=True)

    @property
    def passed(self) -> bool:
        return self.value < self.threshold


# ---------- Loop references ----------
def naive_conv2d(
    x: np.ndarray, kernel: np.ndarray, bias: np.ndarray, stride: int = 1, padding: str = "same"
) -> np.ndarray:
    batch, h, w, cin = x.shape
    kh, kw, _, cout = kernel.shape
    if padding == "same":
        oh, top, _ = _same_padding(h, kh, stride)
        ow, left, _ = _same_padding(w, kw, stride)
    else:
        oh, ow, top, left = (h - kh) // stride + 1, (w - kw) // stride + 1, 0, 0
    out = np.zeros((batch, oh, ow, cout), dtype=np.float64)
    for n in range(batch):
        for i in range(oh):
            for j in range(ow):
                for o in range(cout):
                    acc = float(bias[o])
                    for di in range(kh):
                        for dj in range(kw):
                            r, c = i * stride + di - top, j * stride + dj - left
                            if 0 <= r < h and 0 <= c < w:
                                acc += float(np.dot(x[n, r, c, :], kernel[di, dj, :, o]))
                    out[n, i, j, o] = acc
    return out


def naive_maxpool2d(x: np.ndarray, window: int, stride: int) -> np.ndarray:
    batch, h, w, c = x.shape
    oh, ow = (h - window) // stride + 1, (w - window) // stride + 1
    out = np.zeros((batch, oh, ow, c), dtype=x.dtype)
    for n in range(batch):
        for i in range(oh):
            for j in range(ow):
                for ch in range(c):
                    best = x[n, i * stride, j * stride, ch]
                    for di in range(window):
                        for dj in range(window):
                            v = x[n, i * stride + di, j * stride + dj, ch]
                            if v > best:
                                best = v
                    out[n, i, j, ch] = best
    return out


# ---------- Cases ----------
GradientCase = Tuple[str, Callable[..., Tensor], List[np.ndarray], float]


def _away_from_zero(rng: Rng, shape: Tuple[int, ...], margin: float = 0.05) -> np.ndarray:
    x = rng.normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * (margin + np.abs(x)), x)


def _distinct(rng: Rng, shape: Tuple[int, ...]) -> np.ndarray:
    # pool inputs spaced well beyond eps so the argmax never flips
    n = int(np.prod(shape))
    return (rng.permutation(n).astype(np.float64) * 0.1).reshape(shape)


def gradient_cases(rng: Rng) -> List[GradientCase]:
    labels = np.eye(5)[rng.integers(5, 4)]
    mixing = np.arange(15.0).reshape(5, 3)
    return [
        ("linear", lambda x: scale(x, 3.0), [rng.normal((3, 4))], LINEAR_THRESHOLD),
        ("matmul", matmul, [rng.normal((4, 5)), rng.normal((5, 3))], GRADIENT_THRESHOLD),
        ("add_bias", add_bias, [rng.normal((4, 3)), rng.normal(3)], GRADIENT_THRESHOLD),
        ("leaky_relu", lambda x: leaky_relu(x, 0.5), [_away_from_zero(rng, (4, 6))], KINK_THRESHOLD),
        ("relu", lambda x: leaky_relu(x, 0.0), [_away_from_zero(rng, (4, 6))], KINK_THRESHOLD),
        (
            "conv2d_same",
            lambda x, k, b: conv2d(x, k, b, stride=1, padding="same"),
            [rng.normal((1, 5, 5, 2)), rng.normal((3, 3, 2, 3)), rng.normal(3)],
            GRADIENT_THRESHOLD,
        ),
        (
            "conv2d_valid_stride2",
            lambda x, k, b: conv2d(x, k, b, stride=2, padding="valid"),
            [rng.normal((2, 6, 6, 2)), rng.normal((3, 3, 2, 2)), rng.normal(2)],
            GRADIENT_THRESHOLD,
        ),
        ("maxpool2d", lambda x: maxpool2d(x, 2, 2), [_distinct(rng, (1, 4, 4, 2))], GRADIENT_THRESHOLD),
        ("maxpool2d_overlap", lambda x: maxpool2d(x, 3, 1), [_distinct(rng, (1, 5, 5, 1))], GRADIENT_THRESHOLD),
        ("flatten", lambda x: scale(flatten(x), 2.0), [rng.normal((2, 3, 2, 1))], GRADIENT_THRESHOLD),
        (
            "concat",
            lambda a, b: matmul(concat(a, b, axis=1), Tensor(mixing, dtype=np.float64)),
            [rng.normal((2, 3)), rng.normal((2, 2))],
            GRADIENT_THRESHOLD,
        ),
        ("cross_entropy", lambda z: cross_entropy(z, labels), [rng.normal((4, 5))], GRADIENT_THRESHOLD),
    ]


def conv_grid() -> List[Tuple[int, int, int, int, int, str]]:
    """(size, cin, kernel, cout, stride, padding) combinations checked against the loop reference."""
    return [
        (size, cin, k, 3, stride, padding)
        for size in (3, 5, 8)
        for cin in (1, 4)
        for k in (1, 2, 3)
        for stride in (1, 2)
        for padding in ("same", "valid")
    ]


def pool_grid() -> List[Tuple[int, int, int, int]]:
    """(size, channels, window, stride) combinations checked against the loop reference."""
    return [
        (size, c, window, stride)
        for size in (3, 5, 8)
        for c in (1, 4)
        for window in (1, 2, 3)
        for stride in (1, 2)
    ]


def conv_oracle(rng: Rng) -> float:
    worst = 0.0
    for size, cin, k, cout, stride, padding in conv_grid():
        x, kernel, bias = rng.normal((1, size, size, cin)), rng.normal((k, k, cin, cout)), rng.normal(cout)
        fast = conv2d(
            Tensor(x, dtype=np.float64),
            Tensor(kernel, dtype=np.float64),
            Tensor(bias, dtype=np.float64),
            stride=stride,
            padding=padding,
        ).data
        slow = naive_conv2d(x, kernel, bias, stride, padding)
        if fast.shape != slow.shape:
            return float("inf")
        worst = max(worst, float(np.max(np.abs(fast - slow))))
    return worst


def pool_oracle(rng: Rng) -> float:
    worst = 0.0
    for size, c, window, stride in pool_grid():
        x = rng.normal((1, size, size, c)).astype(np.float32)
        fast = maxpool2d(Tensor(x), window, stride).data
        slow = naive_maxpool2d(x, window, stride)
        if fast.shape != slow.shape:
            return float("inf")
        worst = max(worst, float(np.max(np.abs(fast - slow))))
    return worst


def run_suite(seed: int = 0, repeats: int = 1, names: Sequence[str] = ()) -> List[CheckResult]:
    """Every check, worst value over ``repeats`` random points; ``names`` restricts the gradient cases."""
    rng = Rng(seed)
    worst: dict = {}
    thresholds: dict = {}
    for r in range(repeats):
        for name, op, point, threshold in gradient_cases(rng.derive(r)):
            if names and name not in names:
                continue
            err = grad_check(op, point, eps=1e-3)
            worst[name] = max(worst.get(name, 0.0), err)
            thresholds[name] = threshold
    results = [CheckResult(name=n, kind="gradient", value=worst[n], threshold=thresholds[n]) for n in worst]
    if not names:
        oracle_rng = rng.derive(repeats)
        results.append(CheckResult(name="conv2d_oracle", kind="oracle", value=conv_oracle(oracle_rng), threshold=ORACLE_THRESHOLD))
        results.append(CheckResult(name="maxpool2d_oracle", kind="oracle", value=pool_oracle(oracle_rng), threshold=ORACLE_THRESHOLD))
    for res in results:
        logger.debug("%s %s: %.3e (threshold %.0e)", res.kind, res.name, res.value, res.threshold)
    return results
