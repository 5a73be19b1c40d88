"""Differentiable primitives with hand-written backward passes.

Each ``*_forward`` returns ``(output, cache)``; the matching ``*_backward``
consumes the cache exactly once.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import CacheConsumedError, ShapeError
from .tensor import RngState, Tensor, check_finite, rng_normal


class Cache:
    """Saved forward intermediates, released on first use."""

    __slots__ = ("kind", "_data")

    def __init__(self, kind: str, **data):
        self.kind = kind
        self._data = data

    @property
    def consumed(self) -> bool:
        return self._data is None

    def consume(self) -> dict:
        if self._data is None:
            raise CacheConsumedError(self.kind)
        data, self._data = self._data, None
        return data


@dataclass
class LinearParams:
    weight: Tensor  # [out, in]
    bias: Optional[Tensor]  # [out]

    def __post_init__(self):
        if self.weight.ndim != 2:
            raise ShapeError(f"linear weight must be rank 2, got {self.weight.shape}")
        if self.bias is not None and self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(f"bias shape {self.bias.shape} does not match weight {self.weight.shape}")


@dataclass
class Conv2dParams:
    kernels: Tensor  # [out, in, kH, kW]
    bias: Optional[Tensor]
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.kernels.ndim != 4:
            raise ShapeError(f"conv kernels must be rank 4, got {self.kernels.shape}")
        kh, kw = self.kernels.shape[2:]
        if kh % 2 == 0 or kw % 2 == 0:
            raise ShapeError(f"kernel sizes must be odd, got {kh}x{kw}")
        if self.stride < 1 or self.padding < 0:
            raise ShapeError("stride must be positive and padding non-negative")
        if self.bias is not None and self.bias.shape != (self.kernels.shape[0],):
            raise ShapeError("conv bias shape does not match output channels")


def he_normal(rng: RngState, shape, fan_in: int, gain: float = 1.0) -> Tensor:
    """Zero-mean Gaussian with std gain * sqrt(2 / fan_in)."""
    return rng_normal(rng, gain * np.sqrt(2.0 / fan_in), shape)


def init_linear(rng: RngState, n_in: int, n_out: int, bias: bool = True,
                gain: float = 1.0) -> LinearParams:
    return LinearParams(he_normal(rng, (n_out, n_in), n_in, gain),
                        np.zeros(n_out) if bias else None)


def init_conv2d(rng: RngState, c_in: int, c_out: int, k: int, stride: int = 1,
                bias: bool = False, gain: float = 1.0) -> Conv2dParams:
    return Conv2dParams(he_normal(rng, (c_out, c_in, k, k), c_in * k * k, gain),
                        np.zeros(c_out) if bias else None, stride, k // 2)


# -- linear ---------------------------------------------------------------

def linear_forward(p: LinearParams, x: Tensor) -> tuple[Tensor, Cache]:
    if x.ndim != 2 or x.shape[1] != p.weight.shape[1]:
        raise ShapeError(f"linear expects [m, {p.weight.shape[1]}], got {x.shape}")
    y = x @ p.weight.T
    if p.bias is not None:
        y += p.bias
    return y, Cache("linear", x=x, w=p.weight, has_bias=p.bias is not None)


def linear_backward(cache: Cache, dy: Tensor):
    c = cache.consume()
    x, w = c["x"], c["w"]
    if dy.shape != (x.shape[0], w.shape[0]):
        raise ShapeError(f"linear dy shape {dy.shape} does not match output")
    dx = dy @ w
    dw = dy.T @ x
    db = dy.sum(axis=0) if c["has_bias"] else None
    return dx, dw, db


# -- conv2d ---------------------------------------------------------------

def _conv_out(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def conv_output_hw(h: int, w: int, k: int, stride: int, pad: int) -> tuple[int, int]:
    return _conv_out(h, k, stride, pad), _conv_out(w, k, stride, pad)


def conv2d_forward(p: Conv2dParams, x: Tensor) -> tuple[Tensor, Cache]:
    """Direct cross-correlation, one tensordot per kernel offset."""
    if x.ndim != 4 or x.shape[1] != p.kernels.shape[1]:
        raise ShapeError(f"conv2d expects [m, {p.kernels.shape[1]}, H, W], got {x.shape}")
    m, _, h, w = x.shape
    c_out, _, kh, kw = p.kernels.shape
    s, pad = p.stride, p.padding
    ho, wo = _conv_out(h, kh, s, pad), _conv_out(w, kw, s, pad)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d output would be empty for input {h}x{w}")
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    out = np.zeros((m, ho, wo, c_out))
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s]
            out += np.tensordot(patch, p.kernels[:, :, i, j], axes=([1], [1]))
    y = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    if p.bias is not None:
        y += p.bias[None, :, None, None]
    return y, Cache("conv2d", xp=xp, in_shape=x.shape, k=p.kernels, stride=s, pad=pad,
                    has_bias=p.bias is not None)


def conv2d_backward(cache: Cache, dy: Tensor):
    c = cache.consume()
    xp, k, s, pad = c["xp"], c["k"], c["stride"], c["pad"]
    m, c_in, h, w = c["in_shape"]
    c_out, _, kh, kw = k.shape
    ho, wo = dy.shape[2:]
    if dy.shape[:2] != (m, c_out):
        raise ShapeError(f"conv2d dy shape {dy.shape} does not match output")
    dk = np.empty_like(k)
    dxp = np.zeros((m, xp.shape[2], xp.shape[3], c_in))
    xp_nhwc = xp.transpose(0, 2, 3, 1)
    dy_nhwo = np.ascontiguousarray(dy.transpose(0, 2, 3, 1))
    for i in range(kh):
        for j in range(kw):
            rows = slice(i, i + s * (ho - 1) + 1, s)
            cols = slice(j, j + s * (wo - 1) + 1, s)
            dk[:, :, i, j] = np.tensordot(dy_nhwo, xp_nhwc[:, rows, cols, :], axes=([0, 1, 2], [0, 1, 2]))
            dxp[:, rows, cols, :] += np.tensordot(dy_nhwo, k[:, :, i, j], axes=([3], [0]))
    dxp = dxp.transpose(0, 3, 1, 2)
    dx = dxp[:, :, pad:pad + h, pad:pad + w] if pad else dxp
    db = dy.sum(axis=(0, 2, 3)) if c["has_bias"] else None
    return np.ascontiguousarray(dx), dk, db


# -- elementwise and loss -------------------------------------------------

def relu_forward(x: Tensor) -> tuple[Tensor, Cache]:
    mask = x > 0
    return x * mask, Cache("relu", mask=mask)


def relu_backward(cache: Cache, dy: Tensor) -> Tensor:
    return dy * cache.consume()["mask"]


def global_avg_pool_forward(x: Tensor) -> tuple[Tensor, Cache]:
    if x.ndim != 4:
        raise ShapeError(f"global average pool expects rank 4, got {x.shape}")
    return x.mean(axis=(2, 3)), Cache("gap", shape=x.shape)


def global_avg_pool_backward(cache: Cache, dy: Tensor) -> Tensor:
    m, c, h, w = cache.consume()["shape"]
    return np.broadcast_to(dy[:, :, None, None] / (h * w), (m, c, h, w)).copy()


def softmax_cross_entropy(logits: Tensor, labels) -> tuple[float, Tensor]:
    """Mean negative log-likelihood and its gradient w.r.t. ``logits``."""
    labels = np.asarray(labels)
    m, n_cls = logits.shape
    if labels.shape != (m,):
        raise ShapeError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= n_cls):
        raise ValueError(f"label out of range [0, {n_cls})")
    z = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(m)
    loss = float(np.mean(log_norm - z[rows, labels]))
    probs = np.exp(z - log_norm[:, None])
    probs[rows, labels] -= 1.0
    return loss, probs / m


def classification_error(logits: Tensor, labels) -> float:
    return float(np.mean(np.argmax(logits, axis=1) != np.asarray(labels)))


# -- verification ---------------------------------------------------------

def grad_check(closure: Callable[[Tensor], tuple[float, Tensor]], x: Tensor,
               h: float = 1e-5) -> float:
    """Max relative error between the analytic gradient and central differences.

    ``closure(x)`` returns ``(loss, dloss_dx)``.  Relative error per coordinate
    is ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    x = np.array(x, dtype=np.float64)
    _, analytic = closure(x.copy())
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.empty_like(x)
    flat = x.reshape(-1)
    num_flat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        f_plus = closure(x.copy())[0]
        flat[i] = orig - h
        f_minus = closure(x.copy())[0]
        flat[i] = orig
        num_flat[i] = (f_plus - f_minus) / (2 * h)
    check_finite(numeric, "numeric gradient")
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom)) if x.size else 0.0
