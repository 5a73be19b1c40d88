"""Normalizers as one partition-standardization kernel.

A :class:`PartitionScheme` names which axes a standardization averages over.
Batch normalization pools over the batch axis (and spatial axes for conv
activations); the batch-free schemes (layer, group, instance) pool within
each sample only.  Per-sample schemes are all computed through the same
``[m, groups, cell]`` view, so layer normalization is literally group
normalization with one group.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .errors import BatchTooSmallError, ModeError, ShapeError
from .layers import Cache
from .tensor import RngState, Tensor, moments, rng_uniform

DEFAULT_EPS = 1e-5

BATCH_FEATURE = "batch-per-feature"
BATCH_CHANNEL_SPATIAL = "batch-per-channel-spatial"
SAMPLE_ALL = "per-sample-all-features"
SAMPLE_GROUP = "per-sample-group"
SAMPLE_CHANNEL_SPATIAL = "per-sample-per-channel-spatial"

_KINDS = (BATCH_FEATURE, BATCH_CHANNEL_SPATIAL, SAMPLE_ALL, SAMPLE_GROUP, SAMPLE_CHANNEL_SPATIAL)


@dataclass(frozen=True)
class PartitionScheme:
    kind: str
    groups: int = 1

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown partition scheme {self.kind!r}")
        if self.groups < 1:
            raise ValueError("group count must be >= 1")

    @property
    def is_batch(self) -> bool:
        return self.kind in (BATCH_FEATURE, BATCH_CHANNEL_SPATIAL)

    @classmethod
    def batch_for_rank(cls, rank: int) -> "PartitionScheme":
        if rank == 2:
            return cls(BATCH_FEATURE)
        if rank == 4:
            return cls(BATCH_CHANNEL_SPATIAL)
        raise ShapeError(f"batch normalization needs rank 2 or 4 input, got rank {rank}")

    def view(self, shape: tuple[int, ...]) -> tuple[tuple[int, ...], tuple[int, ...]]:
        """Reshape target and reduce axes that realize this scheme on ``shape``."""
        rank = len(shape)
        if rank not in (2, 4):
            raise ShapeError(f"normalization input must be rank 2 or 4, got {shape}")
        m, d = shape[0], shape[1]
        if self.kind == BATCH_FEATURE:
            if rank != 2:
                raise ShapeError(f"{self.kind} requires rank-2 input, got {shape}")
            return shape, (0,)
        if self.kind == BATCH_CHANNEL_SPATIAL:
            if rank != 4:
                raise ShapeError(f"{self.kind} requires rank-4 input, got {shape}")
            return shape, (0, 2, 3)
        if self.kind == SAMPLE_CHANNEL_SPATIAL:
            if rank != 4:
                raise ShapeError(f"{self.kind} requires rank-4 input, got {shape}")
            return (m, d, shape[2] * shape[3]), (2,)
        g = 1 if self.kind == SAMPLE_ALL else self.groups
        if d % g:
            raise ShapeError(f"group count {g} does not divide {d} features")
        per_sample = int(np.prod(shape[1:]))
        return (m, g, per_sample // g), (2,)


def standardize_forward(x: Tensor, scheme: PartitionScheme, eps: float = DEFAULT_EPS):
    """y = (x - mu_P) / sqrt(var_P + eps) within every partition cell P."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    view_shape, axes = scheme.view(x.shape)
    xv = x.reshape(view_shape)
    mean, var = moments(xv, axes, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (xv - mean) * inv_std
    cache = Cache("standardize", xhat=xhat, inv_std=inv_std, axes=axes, shape=x.shape)
    return xhat.reshape(x.shape), cache, mean, var


def standardize_backward(cache: Cache, dy: Tensor) -> Tensor:
    """dx = inv_std * (dy - mean_P(dy) - xhat * mean_P(dy * xhat))."""
    c = cache.consume()
    xhat, inv_std, axes = c["xhat"], c["inv_std"], c["axes"]
    if dy.shape != c["shape"]:
        raise ShapeError(f"dy shape {dy.shape} does not match forward input {c['shape']}")
    dyv = dy.reshape(xhat.shape)
    dx = inv_std * (dyv - dyv.mean(axis=axes, keepdims=True)
                    - xhat * (dyv * xhat).mean(axis=axes, keepdims=True))
    return dx.reshape(c["shape"])


def _channel_view(t: Tensor, rank: int) -> Tensor:
    return t.reshape((1, -1) + (1,) * (rank - 2))


def norm_forward(x: Tensor, scheme: PartitionScheme, eps: float = DEFAULT_EPS,
                 gamma: Optional[Tensor] = None, beta: Optional[Tensor] = None):
    """Standardize then apply the optional per-channel affine map.

    Returns ``(y, cache, mean, var)`` where mean/var are the cell moments in
    the scheme's view layout.
    """
    xhat, std_cache, mean, var = standardize_forward(x, scheme, eps)
    if gamma is None:
        return xhat, Cache("norm", std=std_cache, xhat=None, gamma=None), mean, var
    y = xhat * _channel_view(gamma, x.ndim) + _channel_view(beta, x.ndim)
    return y, Cache("norm", std=std_cache, xhat=xhat, gamma=gamma), mean, var


def norm_backward(cache: Cache, dy: Tensor):
    """Returns ``(dx, dgamma, dbeta)``; the parameter grads are None without affine."""
    c = cache.consume()
    gamma = c["gamma"]
    if gamma is None:
        return standardize_backward(c["std"], dy), None, None
    sum_axes = (0,) + tuple(range(2, dy.ndim))
    dgamma = (dy * c["xhat"]).sum(axis=sum_axes)
    dbeta = dy.sum(axis=sum_axes)
    dx = standardize_backward(c["std"], dy * _channel_view(gamma, dy.ndim))
    return dx, dgamma, dbeta


# -- batch normalization --------------------------------------------------

@dataclass
class BatchNormState:
    running_mean: Tensor
    running_var: Tensor
    alpha: float = 0.9
    eps: float = DEFAULT_EPS
    gamma: Optional[Tensor] = None
    beta: Optional[Tensor] = None
    mode: str = "train"

    def __post_init__(self):
        if not 0 < self.alpha <= 1:
            raise ValueError(f"alpha must lie in (0, 1], got {self.alpha}")
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if self.mode not in ("train", "infer"):
            raise ValueError(f"mode must be 'train' or 'infer', got {self.mode!r}")
        if np.any(self.running_var < 0):
            raise ValueError("running variance must be non-negative")
        if (self.gamma is None) != (self.beta is None):
            raise ValueError("gamma and beta must be given together")

    @classmethod
    def fresh(cls, d: int, alpha: float = 0.9, eps: float = DEFAULT_EPS,
              affine: bool = False) -> "BatchNormState":
        """Running mean 0, running variance 1, identity affine if requested."""
        return cls(np.zeros(d), np.ones(d), alpha, eps,
                   np.ones(d) if affine else None, np.zeros(d) if affine else None)

    @property
    def features(self) -> int:
        return self.running_mean.shape[0]


def bn_forward_train(state: BatchNormState, x: Tensor):
    """Normalize with batch statistics; returns ``(y, cache, (mu, var))``."""
    if state.mode != "train":
        raise ModeError("bn_forward_train called on a state in infer mode")
    if x.shape[0] < 2:
        raise BatchTooSmallError(x.shape[0])
    if x.shape[1] != state.features:
        raise ShapeError(f"expected {state.features} features, got input {x.shape}")
    scheme = PartitionScheme.batch_for_rank(x.ndim)
    y, cache, mean, var = norm_forward(x, scheme, state.eps, state.gamma, state.beta)
    return y, cache, (mean.reshape(-1), var.reshape(-1))


bn_backward = norm_backward


def bn_update_running(state: BatchNormState, batch_stats) -> BatchNormState:
    """Running average with ``alpha`` weighting the newest batch."""
    mu, var = batch_stats
    if mu.shape != state.running_mean.shape or var.shape != state.running_var.shape:
        raise ShapeError("batch statistics do not match running statistics")
    a = state.alpha
    return replace(state,
                   running_mean=(1.0 - a) * state.running_mean + a * mu,
                   running_var=(1.0 - a) * state.running_var + a * var)


def bn_forward_infer(state: BatchNormState, x: Tensor) -> Tensor:
    """Normalize with the stored statistics; independent of batch composition."""
    if state.mode != "infer":
        raise ModeError("bn_forward_infer called on a state in train mode")
    if x.shape[1] != state.features:
        raise ShapeError(f"expected {state.features} features, got input {x.shape}")
    rank = x.ndim
    if rank not in (2, 4):
        raise ShapeError(f"batch normalization needs rank 2 or 4 input, got {x.shape}")
    inv_std = 1.0 / np.sqrt(state.running_var + state.eps)
    y = (x - _channel_view(state.running_mean, rank)) * _channel_view(inv_std, rank)
    if state.gamma is not None:
        y = y * _channel_view(state.gamma, rank) + _channel_view(state.beta, rank)
    return y


def perturb_stats(state: BatchNormState, delta: float, rng: RngState):
    """Multiplicative noise on the running statistics.

    Each feature gets its own factors ``1 + d_mu`` and ``1 + d_var`` with
    ``d ~ uniform(-delta, delta)``.  A perturbed variance that falls below
    ``eps`` is clamped to ``eps``; the second return value reports whether
    that happened.
    """
    if delta < 0:
        raise ValueError("noise magnitude must be non-negative")
    if delta == 0:
        return replace(state), False
    d = state.features
    d_mu = rng_uniform(rng, -delta, delta, d)
    d_var = rng_uniform(rng, -delta, delta, d)
    var = (1.0 + d_var) * state.running_var
    clamped = bool(np.any(var < state.eps))
    return replace(state, running_mean=(1.0 + d_mu) * state.running_mean,
                   running_var=np.maximum(var, state.eps)), clamped


@dataclass
class NormSpec:
    """Parsed normalizer token: ``bn``, ``ln``, ``in``, ``gn:<g>`` or ``none``."""

    kind: str
    groups: int = 1

    @classmethod
    def parse(cls, token: str) -> "NormSpec":
        t = token.strip().lower()
        if t in ("bn", "ln", "in", "none"):
            return cls(t)
        if t.startswith("gn"):
            _, _, g = t.partition(":")
            try:
                groups = int(g) if g else 4
            except ValueError:
                raise ValueError(f"bad group count in normalizer token {token!r}") from None
            if groups < 1:
                raise ValueError(f"bad group count in normalizer token {token!r}")
            return cls("gn", groups)
        raise ValueError(f"unknown normalizer {token!r}")

    def token(self) -> str:
        return f"gn:{self.groups}" if self.kind == "gn" else self.kind

    def scheme(self, rank: int) -> Optional[PartitionScheme]:
        if self.kind == "bn":
            return PartitionScheme.batch_for_rank(rank)
        if self.kind == "ln":
            return PartitionScheme(SAMPLE_ALL)
        if self.kind == "gn":
            return PartitionScheme(SAMPLE_GROUP, self.groups)
        if self.kind == "in":
            if rank != 4:
                raise ShapeError("instance normalization needs rank-4 activations")
            return PartitionScheme(SAMPLE_CHANNEL_SPATIAL)
        return None
