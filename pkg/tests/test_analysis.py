import math

import numpy as np
import pytest

from estshift.analysis import (MomentAccumulator, PopulationStats, Snapshot, esm, esm_records,
                               esm_trajectory, estimated_stats, expected_population_stats,
                               expected_stats_all, input_distribution_shift, input_shift_record)
from estshift.errors import DataError, ShapeError
from estshift.networks import Linear, NetworkSpec, build
from estshift.tensor import RngState, rng_normal, rng_permutation


def small_net(depth=4, width=6, pattern=None, d_in=5, seed=0):
    return build(NetworkSpec(arch="mlp", depth=depth, width=width, input_shape=(d_in,),
                             norm_pattern=pattern or [], seed=seed))


def loop_moments(rows):
    n = len(rows)
    d = len(rows[0])
    mu = [sum(r[j] for r in rows) / n for j in range(d)]
    var = [sum((r[j] - mu[j]) ** 2 for r in rows) / n for j in range(d)]
    return np.array(mu), np.array(var)


def test_identity_first_layer_gives_raw_moments():
    net = small_net(depth=2, width=3, d_in=3)
    first = next(m for m in net.modules() if isinstance(m, Linear))
    first.p.weight[...] = np.eye(3)
    x = rng_normal(RngState(0), 2.0, (7, 3)) + 1.0
    st = expected_population_stats(net, x, 1)
    np.testing.assert_allclose(st.mu, x.mean(axis=0), rtol=1e-14)
    np.testing.assert_allclose(st.sigma2, x.var(axis=0), rtol=1e-13)


def test_single_bn_matches_loop_oracle():
    net = small_net(depth=2, width=4, d_in=3)
    x = np.array([[0.5, -1.0, 2.0], [1.5, 0.0, -3.0], [-2.0, 4.0, 1.0]])
    w = next(m for m in net.modules() if isinstance(m, Linear)).p.weight
    rows = [[sum(w[o, i] * r[i] for i in range(3)) for o in range(4)] for r in x.tolist()]
    mu, var = loop_moments(rows)
    st = expected_population_stats(net, x, 1)
    np.testing.assert_allclose(st.mu, mu, rtol=1e-12, atol=1e-15)
    np.testing.assert_allclose(st.sigma2, var, rtol=1e-12, atol=1e-15)


def test_repeated_sample_has_zero_variance():
    net = small_net()
    x = np.tile(rng_normal(RngState(1), 1.0, (1, 5)), (6, 1))
    for slot in (1, 2, 3):
        assert np.all(expected_population_stats(net, x, slot).sigma2 < 1e-28)


def test_expected_stats_errors():
    net = small_net()
    with pytest.raises(DataError):
        expected_population_stats(net, np.zeros((0, 5)), 1)
    with pytest.raises(IndexError):
        expected_population_stats(net, np.ones((2, 5)), 7)


def test_lower_layers_use_estimated_stats():
    net = small_net(depth=4)
    x = rng_normal(RngState(2), 1.0, (20, 5))
    before = expected_population_stats(net, x, 3)
    net.bn_layer(1).bn.running_mean[...] += 0.7
    after = expected_population_stats(net, x, 3)
    assert not np.allclose(before.mu, after.mu)
    # Layer 1 itself sits below every BN, so its expected stats ignore the change.
    np.testing.assert_array_equal(expected_population_stats(net, x, 1).mu,
                                  expected_population_stats(small_net(depth=4), x, 1).mu)


def test_no_bn_below_layer_is_invariant_to_higher_estimates():
    net = small_net(depth=4, pattern=["ln", "bn", "bn"])
    x = rng_normal(RngState(3), 1.0, (10, 5))
    ref = expected_population_stats(net, x, 2)
    net.bn_layer(3).bn.running_var[...] *= 5.0
    got = expected_population_stats(net, x, 2)
    np.testing.assert_array_equal(ref.mu, got.mu)
    np.testing.assert_array_equal(ref.sigma2, got.sigma2)


def test_order_and_batch_size_invariance():
    net = small_net(depth=6, width=8)
    x = rng_normal(RngState(4), 1.5, (101, 5)) + 0.2
    ref, _ = expected_stats_all(net, x)
    perm = rng_permutation(RngState(5), 101)
    for bs, xs in ((7, x), (None, x[perm]), (33, x[perm]), (1, x)):
        got, _ = expected_stats_all(net, xs, bs)
        for slot in ref:
            np.testing.assert_allclose(got[slot].mu, ref[slot].mu, rtol=1e-12, atol=1e-14)
            np.testing.assert_allclose(got[slot].sigma2, ref[slot].sigma2, rtol=1e-11, atol=1e-14)


def test_moment_accumulator_merges_4d_batches():
    x = rng_normal(RngState(6), 3.0, (9, 2, 3, 3)) + 100.0
    acc = MomentAccumulator()
    for i in range(0, 9, 4):
        acc.push(x[i:i + 4])
    st = acc.result()
    np.testing.assert_allclose(st.mu, x.mean(axis=(0, 2, 3)), rtol=1e-14)
    np.testing.assert_allclose(st.sigma2, x.var(axis=(0, 2, 3)), rtol=1e-10)
    with pytest.raises(DataError):
        MomentAccumulator().result()


def test_esm_examples():
    a = PopulationStats(np.array([1.0, 2.0]), np.array([4.0, 9.0]))
    assert esm(a, a) == (0.0, 0.0)
    zero = PopulationStats(np.zeros(2), np.array([4.0, 9.0]))
    assert esm(a, zero)[0] == pytest.approx(math.sqrt(5), abs=1e-12)
    assert esm(PopulationStats(np.zeros(1), np.array([4.0])),
               PopulationStats(np.zeros(1), np.array([1.0])))[1] == 1.0
    with pytest.raises(ValueError):
        PopulationStats(np.zeros(1), np.array([-1.0]))
    with pytest.raises(ShapeError):
        esm(a, PopulationStats(np.zeros(3), np.ones(3)))


def test_esm_zero_iff_equal():
    rng = RngState(7)
    for _ in range(20):
        mu = rng_normal(rng, 1.0, 4)
        var = rng_normal(rng, 1.0, 4) ** 2
        p = PopulationStats(mu, var)
        q = PopulationStats(mu.copy(), var.copy())
        assert esm(p, q) == (0.0, 0.0)
        q.mu[0] += 1e-3
        m, s = esm(p, q)
        assert m > 0 and s == 0.0


def test_input_distribution_shift_examples():
    x = rng_normal(RngState(8), 1.0, (10, 3))
    assert input_distribution_shift(x, x) == 0.0
    assert input_distribution_shift(np.array([[0.0], [2.0]]), np.array([[0.0], [4.0]])) == 1.0
    y = rng_normal(RngState(9), 2.0, (7, 3))
    assert input_distribution_shift(x, y) == input_distribution_shift(y, x)
    with pytest.raises(DataError):
        input_distribution_shift(np.zeros((0, 3)), x)
    rec = input_shift_record(np.array([[0.0], [2.0]]), np.array([[0.0], [4.0]]), 5)
    assert (rec.epoch, rec.layer_index, rec.esm_mu, rec.esm_sigma) == (5, 0, 1.0, 1.0)


def test_esm_records_one_per_bn_layer():
    net = small_net(depth=5)
    x = rng_normal(RngState(10), 1.0, (12, 5))
    recs, logits = esm_records(net, x, 3)
    assert [r.layer_index for r in recs] == [1, 2, 3, 4]
    assert all(r.epoch == 3 and r.esm_mu >= 0 and r.esm_sigma >= 0 for r in recs)
    assert logits.shape == (12, 10)


def test_esm_zero_when_estimates_match_expected():
    net = small_net(depth=4)
    x = rng_normal(RngState(11), 1.0, (30, 5))
    # Fix the estimates layer by layer, bottom up, so each matches its expected stats.
    for n in net.bn_layers:
        st = expected_population_stats(net, x, n.slot)
        n.bn.running_mean[...] = st.mu
        n.bn.running_var[...] = st.sigma2
    recs, _ = esm_records(net, x, 0)
    for r in recs:
        assert r.esm_mu < 1e-12 and r.esm_sigma < 1e-12


def test_trajectory_matches_direct_esm():
    net = small_net(depth=3, width=4)
    x = rng_normal(RngState(12), 1.0, (9, 5))
    snaps = []
    for epoch, shift in ((1, 0.0), (2, 0.5)):
        for n in net.bn_layers:
            n.bn.running_mean[...] = shift
            n.bn.running_var[...] = 1.0 + shift
        snaps.append(Snapshot.take(net, epoch))
    recs = esm_trajectory(net, snaps, x)
    assert [(r.epoch, r.layer_index) for r in recs] == [(1, 1), (1, 2), (2, 1), (2, 2)]
    for r in recs[2:]:
        direct = esm(estimated_stats(net, r.layer_index),
                     expected_population_stats(net, x, r.layer_index))
        assert (r.esm_mu, r.esm_sigma) == direct
    assert len(esm_trajectory(net, snaps[:1], x)) == 2
    with pytest.raises(KeyError):
        esm_trajectory(net, snaps, x, epochs=[1, 3])
