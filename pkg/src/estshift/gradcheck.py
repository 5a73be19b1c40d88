"""Finite-difference checks of every hand-written backward pass.

Each check builds a random instance, then compares the analytic gradient of
a scalar loss with central differences for the input and every parameter.
Losses are ``sum(R * y)`` with a fixed random ``R`` unless noted.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import layers as L
from .networks import NetworkSpec, ReLU, build
from .normalization import (SAMPLE_ALL, SAMPLE_CHANNEL_SPATIAL, SAMPLE_GROUP, BatchNormState,
                            PartitionScheme, bn_backward, bn_forward_train, norm_backward,
                            norm_forward)
from .tensor import RngState, rng_normal, rng_uniform

H = 1e-5
# Inputs closer than this to a ReLU kink are resampled so h cannot straddle it.
KINK_MARGIN = 1e-3
# A unit that is active (or dead) on the whole batch gives parameters whose
# true gradient is exactly zero, where the relative error measures only
# rounding noise.  Such MLP instances are resampled too.

Run = Callable[[], tuple[float, list]]


def max_rel_error(run: Run, arrays: list, h: float = H) -> float:
    """Worst :func:`grad_check` error over all ``arrays`` (mutated in place, then restored)."""
    worst = 0.0
    for i, a in enumerate(arrays):
        def closure(v, i=i, a=a):
            saved = a.copy()
            a[...] = v
            try:
                loss, grads = run()
            finally:
                a[...] = saved
            return loss, grads[i]
        worst = max(worst, L.grad_check(closure, a.copy(), h))
    return worst


def _away_from_zero(rng: RngState, shape) -> np.ndarray:
    x = rng_normal(rng, 1.0, shape)
    return np.where(np.abs(x) < 0.05, np.sign(x + 1e-300) * 0.05 + x, x)


def check_linear(rng: RngState) -> float:
    p = L.LinearParams(rng_normal(rng, 1.0, (4, 5)), rng_normal(rng, 1.0, 4))
    x = rng_normal(rng, 1.0, (6, 5))
    r = rng_normal(rng, 1.0, (6, 4))

    def run():
        y, cache = L.linear_forward(p, x)
        dx, dw, db = L.linear_backward(cache, r)
        return float(np.sum(r * y)), [dx, dw, db]
    return max_rel_error(run, [x, p.weight, p.bias])


def check_conv3x3(rng: RngState, stride: int = 1) -> float:
    p = L.Conv2dParams(rng_normal(rng, 1.0, (3, 2, 3, 3)), rng_normal(rng, 1.0, 3), stride, 1)
    x = rng_normal(rng, 1.0, (2, 2, 5, 5))
    ho, wo = L.conv_output_hw(5, 5, 3, stride, 1)
    r = rng_normal(rng, 1.0, (2, 3, ho, wo))

    def run():
        y, cache = L.conv2d_forward(p, x)
        dx, dk, db = L.conv2d_backward(cache, r)
        return float(np.sum(r * y)), [dx, dk, db]
    return max_rel_error(run, [x, p.kernels, p.bias])


def check_relu(rng: RngState) -> float:
    x = _away_from_zero(rng, (5, 7))
    r = rng_normal(rng, 1.0, (5, 7))

    def run():
        y, cache = L.relu_forward(x)
        return float(np.sum(r * y)), [L.relu_backward(cache, r)]
    return max_rel_error(run, [x])


def check_bn_train(rng: RngState, rank: int = 2) -> float:
    shape = (8, 5) if rank == 2 else (3, 4, 3, 3)
    d = shape[1]
    state = BatchNormState.fresh(d, affine=True)
    state.gamma[...] = rng_uniform(rng, 0.5, 1.5, d)
    state.beta[...] = rng_normal(rng, 1.0, d)
    x = rng_normal(rng, 2.0, shape) + 0.5
    r = rng_normal(rng, 1.0, shape)

    def run():
        y, cache, _ = bn_forward_train(state, x)
        dx, dg, db = bn_backward(cache, r)
        return float(np.sum(r * y)), [dx, dg, db]
    return max_rel_error(run, [x, state.gamma, state.beta])


def check_per_sample(rng: RngState, scheme: PartitionScheme, shape) -> float:
    d = shape[1]
    gamma = rng_uniform(rng, 0.5, 1.5, d)
    beta = rng_normal(rng, 1.0, d)
    x = rng_normal(rng, 2.0, shape) - 0.3
    r = rng_normal(rng, 1.0, shape)

    def run():
        y, cache, _, _ = norm_forward(x, scheme, 1e-5, gamma, beta)
        dx, dg, db = norm_backward(cache, r)
        return float(np.sum(r * y)), [dx, dg, db]
    return max_rel_error(run, [x, gamma, beta])


def _mlp_instance(rng: RngState):
    """A 4-layer BN MLP and a batch whose ReLU inputs avoid the kink and vary in sign."""
    for _ in range(100):
        spec = NetworkSpec(arch="mlp", depth=4, width=6, input_shape=(5,), num_classes=3,
                           affine=True, seed=int(rng_uniform(rng, 0, 2 ** 31, 1)[0]))
        net = build(spec)
        for n in net.norms:
            n.bn.gamma[...] = rng_uniform(rng, 0.5, 1.5, n.features)
            n.bn.beta[...] = rng_normal(rng, 0.5, n.features)
        x = rng_normal(rng, 1.0, (8, 5))
        y = rng_uniform(rng, 0, 3, 8).astype(np.int64)
        if _well_conditioned(net, x):
            return net, x, y
    raise RuntimeError("could not draw a kink-free MLP instance")


def _well_conditioned(net, x) -> bool:
    ok = True
    h = x
    for m in net.body.mods:
        if isinstance(m, ReLU):
            ok &= bool(np.min(np.abs(h)) > KINK_MARGIN)
            ok &= bool(np.all((h > 0).any(axis=0) & (h < 0).any(axis=0)))
        h = m.forward(h, True)
    net.release()
    return ok


def check_mlp_bn(rng: RngState) -> float:
    net, x, y = _mlp_instance(rng)
    arrays = [x] + [t for _, _, t in net.param_items()]
    owners = [(m, name) for m, name, _ in net.param_items()]

    def run():
        logits = net.forward(x, "train")
        loss, d = L.softmax_cross_entropy(logits, y)
        dx = net.backward(d)
        grads = [dx] + [m.grads[name] for m, name in owners]
        net.release()
        return loss, grads
    return max_rel_error(run, arrays)


def instance_checks() -> dict:
    """Name -> function(rng) returning the max relative error on one instance."""
    return {
        "linear": check_linear,
        "conv3x3": lambda r: check_conv3x3(r, 1),
        "conv3x3_s2": lambda r: check_conv3x3(r, 2),
        "relu": check_relu,
        "bn_train": lambda r: check_bn_train(r, 2),
        "bn_train_4d": lambda r: check_bn_train(r, 4),
        "ln": lambda r: check_per_sample(r, PartitionScheme(SAMPLE_ALL), (4, 12)),
        "gn1": lambda r: check_per_sample(r, PartitionScheme(SAMPLE_GROUP, 1), (3, 16, 2, 2)),
        "gn4": lambda r: check_per_sample(r, PartitionScheme(SAMPLE_GROUP, 4), (3, 16, 2, 2)),
        "gn16": lambda r: check_per_sample(r, PartitionScheme(SAMPLE_GROUP, 16), (3, 16, 2, 2)),
        "in": lambda r: check_per_sample(r, PartitionScheme(SAMPLE_CHANNEL_SPATIAL), (3, 4, 3, 3)),
        "mlp4_bn": check_mlp_bn,
    }


def check_all(seed: int = 0, instances: int = 20) -> dict:
    """Worst error per layer type over ``instances`` random instances."""
    out = {}
    for k, (name, fn) in enumerate(instance_checks().items()):
        rng = RngState(seed).split(k)
        out[name] = max(fn(rng) for _ in range(instances))
    return out
