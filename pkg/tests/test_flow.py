import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from eventflow.flow import (
    CountDistribution,
    CouplingDraw,
    FlowState,
    interpolate,
    perturb,
    sample_balanced_pair,
    sample_reference_counts,
    target_velocity,
)
from eventflow.synthetic import SimulatorSpec, simulate_splits


def test_point_mass_always_same_count():
    rng = np.random.default_rng(0)
    assert set(sample_reference_counts(CountDistribution.point_mass(5), rng, 100)) == {5}


def test_uniform_two_point_proportion():
    draws = sample_reference_counts(CountDistribution([0.0, 0.5, 0.5]), np.random.default_rng(0), 10_000)
    assert abs(np.mean(draws == 1) - 0.5) <= 0.015


def test_empirical_hawkes_counts_mean():
    train = simulate_splits(SimulatorSpec("hawkes1"), 1000, 0).train
    dist = CountDistribution.from_counts(train.counts())
    draws = sample_reference_counts(dist, np.random.default_rng(1), 20_000)
    # exact mean of the sampled histogram, within 3 SE
    se = np.sqrt(np.sum(dist.probs * (np.arange(dist.probs.size) - dist.mean()) ** 2) / draws.size)
    assert abs(draws.mean() - dist.mean()) < 3 * se
    # and the histogram itself agrees with the published statistic
    assert abs(dist.mean() - 95.4) < 0.1 * 95.4


def test_count_distribution_validation():
    with pytest.raises(ValueError):
        CountDistribution([0.5, 0.2])
    with pytest.raises(ValueError):
        CountDistribution([1.5, -0.5])
    with pytest.raises(ValueError):
        CountDistribution.from_counts([])
    d = CountDistribution.from_counts([0, 2, 2, 4], n_max=6)
    assert d.n_max == 6 and d.mean() == pytest.approx(2.0)


def test_balanced_pair_examples():
    rng = np.random.default_rng(0)
    p = sample_balanced_pair([], rng)
    assert len(p.gamma0) == 0 and len(p.gamma1) == 0
    p = sample_balanced_pair(np.linspace(-1, 1, 7), rng)
    assert p.gamma0.size == 7
    assert np.all(np.diff(p.gamma0) >= 0)


@given(n=st.integers(0, 300), seed=st.integers(0, 2**31))
def test_balanced_pair_property(n, seed):
    p = sample_balanced_pair(np.zeros(n), np.random.default_rng(seed))
    assert p.gamma0.size == p.gamma1.size == n


def test_unbalanced_pair_rejected():
    with pytest.raises(ValueError):
        CouplingDraw(np.zeros(2), np.zeros(3))


def test_interpolate_examples():
    pair = CouplingDraw(np.array([-1.0, 0.0]), np.array([1.0, 2.0]))
    np.testing.assert_array_equal(interpolate(pair, 0.0).positions, pair.gamma0)
    np.testing.assert_array_equal(interpolate(pair, 1.0).positions, pair.gamma1)
    assert interpolate(CouplingDraw([-1.0], [1.0]), 0.25).positions[0] == pytest.approx(-0.5)
    with pytest.raises(ValueError):
        interpolate(pair, 1.5)


@given(s=st.floats(0.0, 1.0))
def test_interpolant_velocity_is_target(s):
    # d/ds of the linear path equals gamma1 - gamma0 everywhere
    pair = CouplingDraw(np.array([-1.0, 0.3]), np.array([0.5, 2.0]))
    h = 1e-6
    lo, hi = max(s - h, 0.0), min(s + h, 1.0)
    fd = (interpolate(pair, hi).positions - interpolate(pair, lo).positions) / (hi - lo)
    np.testing.assert_allclose(fd, target_velocity(pair), atol=1e-6)


def test_perturb():
    rng = np.random.default_rng(0)
    state = FlowState(np.array([0.1, 0.5, 0.9]), 0.3)
    assert np.max(np.abs(perturb(state, 1e-12, rng).positions - state.positions)) < 1e-6
    big = perturb(FlowState(np.zeros(20_000), 0.5), 0.01, rng)
    assert big.positions.std() == pytest.approx(0.01, rel=0.05)
    assert big.s == 0.5
    with pytest.raises(ValueError):
        perturb(state, 0.0, rng)


def test_target_velocity_examples():
    np.testing.assert_array_equal(target_velocity(CouplingDraw([1.0, 2.0], [1.0, 2.0])), [0.0, 0.0])
    np.testing.assert_array_equal(target_velocity(CouplingDraw([-1.0, 0.0], [0.0, 2.0])), [1.0, 2.0])
