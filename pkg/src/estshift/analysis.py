"""Estimation-shift measurement.

For a trained network and a test set, the *expected* statistics of a BN
layer are the moments of that layer's input when the whole network (every
BN using its running estimates) processes the test set.  The estimation
shift magnitude compares them with the layer's running estimates:

    esm_mu    = || mu_hat - mu_exp ||_2
    esm_sigma = || sqrt(var_hat) - sqrt(var_exp) ||_2
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import DataError, ShapeError
from .networks import Network
from .tensor import Tensor, moments


@dataclass
class PopulationStats:
    mu: Tensor
    sigma2: Tensor

    def __post_init__(self):
        if self.mu.shape != self.sigma2.shape:
            raise ShapeError("mean and variance shapes differ")
        if np.any(self.sigma2 < 0):
            raise ValueError("negative variance in population statistics")


@dataclass(frozen=True)
class EsmRecord:
    epoch: int
    layer_index: int
    esm_mu: float
    esm_sigma: float

    FIELDS = ("epoch", "layer", "esm_mu", "esm_sigma")

    def row(self) -> tuple:
        return (self.epoch, self.layer_index, self.esm_mu, self.esm_sigma)


class MomentAccumulator:
    """Per-channel mean/variance over a stream of batches.

    Batches are merged with the pairwise update of Chan et al., so the pooled
    result does not depend on how the set was split into batches (up to
    rounding) and never subtracts large sums of squares.
    """

    def __init__(self):
        self.n = 0
        self.mean = None
        self.m2 = None

    def push(self, x: Tensor):
        axes = (0,) if x.ndim == 2 else (0, 2, 3)
        n_b = x.shape[0] * (1 if x.ndim == 2 else x.shape[2] * x.shape[3])
        mean_b, var_b = moments(x, axes)
        m2_b = var_b * n_b
        if self.n == 0:
            self.n, self.mean, self.m2 = n_b, mean_b, m2_b
            return
        n = self.n + n_b
        delta = mean_b - self.mean
        self.mean = self.mean + delta * (n_b / n)
        self.m2 = self.m2 + m2_b + delta ** 2 * (self.n * n_b / n)
        self.n = n

    def result(self) -> PopulationStats:
        if self.n == 0:
            raise DataError("no samples accumulated")
        return PopulationStats(self.mean.copy(), self.m2 / self.n)


def estimated_stats(net: Network, layer_index: int) -> PopulationStats:
    bn = net.bn_layer(layer_index).bn
    return PopulationStats(bn.running_mean.copy(), bn.running_var.copy())


def _batches(x: Tensor, batch_size: Optional[int]) -> Iterable[Tensor]:
    if not batch_size or batch_size >= x.shape[0]:
        yield x
        return
    for i in range(0, x.shape[0], batch_size):
        yield x[i:i + batch_size]


def expected_stats_all(net: Network, test_x: Tensor, batch_size: Optional[int] = None,
                       layers: Optional[Sequence[int]] = None):
    """Expected statistics for every (or the listed) BN layer from one inference pass.

    Returns ``(stats_by_layer, logits)``; the logits come from the same pass
    so test error can be read off without a second forward.
    """
    if test_x.shape[0] == 0:
        raise DataError("empty test set")
    wanted = set(n.slot for n in net.bn_layers) if layers is None else set(layers)
    for slot in wanted:
        net.bn_layer(slot)
    acc = {slot: MomentAccumulator() for slot in wanted}

    def hook(slot, x):
        if slot in acc:
            acc[slot].push(x)

    logits = [net.forward(xb, "infer", hook) for xb in _batches(test_x, batch_size)]
    return {slot: a.result() for slot, a in acc.items()}, np.concatenate(logits, axis=0)


def expected_population_stats(net: Network, test_x: Tensor, layer_index: int,
                              batch_size: Optional[int] = None) -> PopulationStats:
    stats, _ = expected_stats_all(net, test_x, batch_size, [layer_index])
    return stats[layer_index]


def esm(estimated: PopulationStats, expected: PopulationStats) -> tuple[float, float]:
    if estimated.mu.shape != expected.mu.shape:
        raise ShapeError("estimated and expected statistics have different shapes")
    esm_mu = float(np.linalg.norm(estimated.mu - expected.mu))
    esm_sigma = float(np.linalg.norm(np.sqrt(estimated.sigma2) - np.sqrt(expected.sigma2)))
    return esm_mu, esm_sigma


def input_distribution_shift(train_x: Tensor, test_x: Tensor) -> float:
    """L2 distance between per-input-feature standard deviations of two sets."""
    if train_x.shape[0] == 0 or test_x.shape[0] == 0:
        raise DataError("empty set")
    _, v_train = moments(train_x.reshape(train_x.shape[0], -1), 0)
    _, v_test = moments(test_x.reshape(test_x.shape[0], -1), 0)
    return float(np.linalg.norm(np.sqrt(v_train) - np.sqrt(v_test)))


def input_shift_record(train_x: Tensor, test_x: Tensor, epoch: int) -> EsmRecord:
    """Layer-0 record: the same distances taken on the raw inputs."""
    if train_x.shape[0] == 0 or test_x.shape[0] == 0:
        raise DataError("empty set")
    m_train, _ = moments(train_x.reshape(train_x.shape[0], -1), 0)
    m_test, _ = moments(test_x.reshape(test_x.shape[0], -1), 0)
    return EsmRecord(epoch, 0, float(np.linalg.norm(m_train - m_test)),
                     input_distribution_shift(train_x, test_x))


def esm_records(net: Network, test_x: Tensor, epoch: int, batch_size: Optional[int] = None):
    """One :class:`EsmRecord` per BN layer at the network's current state.

    Returns ``(records, logits)`` with the test-set logits of the same pass.
    """
    expected, logits = expected_stats_all(net, test_x, batch_size)
    records = []
    for slot in sorted(expected):
        mu, sigma = esm(estimated_stats(net, slot), expected[slot])
        records.append(EsmRecord(epoch, slot, mu, sigma))
    return records, logits


@dataclass
class Snapshot:
    epoch: int
    arrays: list

    @classmethod
    def take(cls, net: Network, epoch: int) -> "Snapshot":
        return cls(epoch, [a.copy() for a in net.state_arrays()])


def esm_trajectory(net: Network, snapshots: Sequence[Snapshot], test_x: Tensor,
                   epochs: Optional[Sequence[int]] = None,
                   batch_size: Optional[int] = None) -> list[EsmRecord]:
    """ESM per (epoch, BN layer), each epoch recomputed from its own snapshot.

    ``net`` is used as a template and is left holding the last snapshot.
    When ``epochs`` is given every listed epoch must have a snapshot.
    """
    by_epoch = {s.epoch: s for s in snapshots}
    order = sorted(by_epoch) if epochs is None else list(epochs)
    missing = [e for e in order if e not in by_epoch]
    if missing:
        raise KeyError(f"missing snapshots for epochs {missing}")
    out: list[EsmRecord] = []
    for e in order:
        net.load_state_arrays(by_epoch[e].arrays)
        out.extend(esm_records(net, test_x, e, batch_size)[0])
    return out
