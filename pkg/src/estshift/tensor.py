"""Dense float64 tensors, reductions, and a counter-based random stream.

Tensors are plain ``numpy.ndarray`` values of dtype float64 in C order.
Every op here returns a fresh array and never mutates its inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateReductionError, NonFiniteError, ShapeError

Tensor = np.ndarray

_U64 = 1 << 64


def as_tensor(x) -> Tensor:
    return np.ascontiguousarray(x, dtype=np.float64)


def check_finite(x: Tensor, what: str = "tensor") -> Tensor:
    if not np.isfinite(x).all():
        raise NonFiniteError(f"non-finite values in {what}")
    return x


def _normalize_axes(ndim: int, axes) -> tuple[int, ...]:
    if isinstance(axes, int):
        axes = (axes,)
    axes = tuple(sorted({a % ndim if -ndim <= a < ndim else _bad_axis(a, ndim) for a in axes}))
    if not axes:
        raise ShapeError("reduce_axes must be non-empty")
    return axes


def _bad_axis(a, ndim):
    raise ShapeError(f"axis {a} out of range for rank {ndim}")


def moments(x: Tensor, reduce_axes, keepdims: bool = False) -> tuple[Tensor, Tensor]:
    """Mean and biased (divide-by-m) variance over ``reduce_axes``.

    Two-pass: the variance is the mean of squared deviations from the
    already-computed mean, which avoids the cancellation of E[x^2]-E[x]^2.
    """
    x = np.asarray(x, dtype=np.float64)
    axes = _normalize_axes(x.ndim, reduce_axes)
    m = 1
    for a in axes:
        m *= x.shape[a]
    if m == 0:
        raise DegenerateReductionError()
    check_finite(x, "moments input")
    mean = x.mean(axis=axes, keepdims=True)
    var = np.square(x - mean).mean(axis=axes, keepdims=True)
    check_finite(mean, "moments")
    check_finite(var, "moments")
    if not keepdims:
        mean = mean.squeeze(axis=axes)
        var = var.squeeze(axis=axes)
    return mean, var


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    return check_finite(a @ b, "matmul")


@dataclass
class RngState:
    """Position in a Philox-4x64 stream.

    ``seed`` and ``stream`` form the 128-bit Philox key; ``counter`` is the
    number of draws already taken from this key.  Each draw runs in its own
    counter block, so the output of draw k depends only on (seed, stream, k).
    """

    seed: int
    counter: int = 0
    stream: int = 0
    algorithm: str = "philox4x64"

    def __post_init__(self):
        for name in ("seed", "counter", "stream"):
            v = getattr(self, name)
            if not 0 <= int(v) < _U64:
                raise ValueError(f"{name} must be a 64-bit unsigned integer, got {v}")
        if self.algorithm != "philox4x64":
            raise ValueError(f"unsupported rng algorithm {self.algorithm!r}")

    def split(self, index: int) -> "RngState":
        """Independent stream for a sub-run, derived from (seed, index)."""
        mixed = (self.stream * 0x9E3779B97F4A7C15 + int(index) + 1) % _U64
        return RngState(self.seed, 0, mixed)

    def to_dict(self) -> dict:
        return {"seed": self.seed, "counter": self.counter, "stream": self.stream,
                "algorithm": self.algorithm}

    @classmethod
    def from_dict(cls, d: dict) -> "RngState":
        return cls(int(d["seed"]), int(d["counter"]), int(d.get("stream", 0)),
                   d.get("algorithm", "philox4x64"))


def _next_generator(rng: RngState) -> np.random.Generator:
    key = rng.seed | (rng.stream << 64)
    # The draw index lives in the top counter word; numpy increments the low word.
    counter = rng.counter << 192
    rng.counter += 1
    return np.random.Generator(np.random.Philox(key=key, counter=counter))


def _shape(shape) -> tuple[int, ...]:
    if isinstance(shape, (int, np.integer)):
        return (int(shape),)
    return tuple(int(s) for s in shape)


def rng_uniform(rng: RngState, lo: float, hi: float, shape) -> Tensor:
    """I.i.d. samples in [lo, hi); advances ``rng`` by one draw."""
    if lo > hi:
        raise ValueError(f"rng_uniform requires lo <= hi, got lo={lo}, hi={hi}")
    gen = _next_generator(rng)
    u = gen.random(_shape(shape))
    out = lo + (hi - lo) * u
    # lo + (hi-lo)*u can round up to hi for u just below 1.
    return np.minimum(out, np.nextafter(hi, -np.inf)) if hi > lo else out


def rng_normal(rng: RngState, std: float, shape) -> Tensor:
    gen = _next_generator(rng)
    return gen.standard_normal(_shape(shape)) * std


def rng_permutation(rng: RngState, n: int) -> np.ndarray:
    gen = _next_generator(rng)
    return gen.permutation(n)
