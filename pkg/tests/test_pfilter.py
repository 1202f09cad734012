"""Particle filter operations: weights, resampling, composed steps."""
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dualsmpc.model import (
    DimensionMismatch,
    Gaussian,
    LinearGaussianModel,
    PointMass,
    RandomStream,
)
from dualsmpc.pfilter import (
    DegenerateBelief,
    ParticleBelief,
    ResampleConfig,
    ess,
    filter_step,
    init_belief,
    predict,
    save_belief_csv,
    systematic_resample,
    weight_update,
    weighted_mean,
)

SCALAR = LinearGaussianModel([[1.0]], [[1.0]], [[1.0]], [[0.0]], [[1.0]])


def belief_of(particles, weights):
    return ParticleBelief(np.asarray(particles, dtype=float), np.asarray(weights, dtype=float))


class TestBeliefValidation:
    def test_rejects_unnormalized_weights(self):
        with pytest.raises(DimensionMismatch):
            belief_of([[0.0], [1.0]], [0.6, 0.6])

    def test_rejects_negative_weights(self):
        with pytest.raises(DimensionMismatch):
            belief_of([[0.0], [1.0]], [1.5, -0.5])

    def test_rejects_shape_mismatch(self):
        with pytest.raises(DimensionMismatch):
            belief_of([[0.0], [1.0]], [1.0])

    def test_threshold_range(self):
        ResampleConfig(threshold=0.0)
        ResampleConfig(threshold=1.0)
        with pytest.raises(DimensionMismatch):
            ResampleConfig(threshold=1.5)

    def test_jitter_must_be_nonnegative(self):
        ResampleConfig(jitter=0.0)
        ResampleConfig(jitter=0.5)
        with pytest.raises(DimensionMismatch):
            ResampleConfig(jitter=-0.1)


class TestInitBelief:
    def test_gaussian_prior_clt(self):
        prior = Gaussian([2.0, -1.0], np.diag([4.0, 1.0]))
        n = 10_000
        b = init_belief(prior, n, RandomStream(5))
        se = np.sqrt(np.diag(prior.cov) / n)
        assert np.all(np.abs(weighted_mean(b) - prior.mean) < 3 * se)

    def test_point_mass_prior(self):
        b = init_belief(PointMass([1.0, 2.0]), 50, RandomStream(0))
        assert np.all(b.particles == [1.0, 2.0])
        assert np.all(b.weights == 1.0 / 50)


class TestPredict:
    def test_zero_noise_applies_map_per_particle(self):
        A = np.array([[1.0, 1.0], [0.0, 0.9]])
        B = np.array([[0.5], [1.0]])
        m = LinearGaussianModel(A, B, np.eye(2), np.zeros((2, 2)), np.eye(2))
        b = belief_of([[1.0, 0.0], [0.0, 2.0]], [0.3, 0.7])
        out = predict(b, np.array([1.0]), m, RandomStream(1))
        np.testing.assert_allclose(out.particles, [[1.5, 1.0], [2.5, 2.8]])
        np.testing.assert_array_equal(out.weights, b.weights)

    def test_noise_draws_differ_across_particles(self):
        m = LinearGaussianModel([[1.0]], [[0.0]], [[1.0]], [[1.0]], [[1.0]])
        b = belief_of(np.zeros((100, 1)), np.full(100, 0.01))
        out = predict(b, np.zeros(1), m, RandomStream(3))
        assert np.unique(out.particles).size == 100


class TestWeightUpdate:
    def test_two_to_one_likelihood_ratio(self):
        # Residuals 0 and sqrt(2 ln 2) give a likelihood ratio of exactly 2.
        r = math.sqrt(2.0 * math.log(2.0))
        b = belief_of([[0.0], [r]], [0.5, 0.5])
        out = weight_update(b, np.array([0.0]), SCALAR)
        np.testing.assert_allclose(out.weights, [2.0 / 3.0, 1.0 / 3.0], rtol=1e-12)

    def test_zero_likelihood_particle(self):
        m = LinearGaussianModel([[1.0]], [[1.0]], [[1.0]], [[0.0]], [[0.0]])
        b = belief_of([[0.0], [1.0]], [0.5, 0.5])
        out = weight_update(b, np.array([1.0]), m)
        np.testing.assert_array_equal(out.weights, [0.0, 1.0])

    def test_uninformative_likelihood_keeps_weights(self):
        b = belief_of([[1.0], [1.0], [1.0]], [0.2, 0.3, 0.5])
        out = weight_update(b, np.array([1.0]), SCALAR)
        np.testing.assert_allclose(out.weights, b.weights, rtol=1e-12)

    def test_degenerate_raises(self):
        b = belief_of([[0.0], [1.0]], [0.5, 0.5])
        with pytest.raises(DegenerateBelief):
            weight_update(b, np.array([1e6]), SCALAR)

    @given(st.integers(0, 10**6))
    @settings(max_examples=30, deadline=None)
    def test_weights_normalized_after_update(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 40))
        w = rng.random(n) + 1e-3
        w /= w.sum()
        b = belief_of(rng.standard_normal((n, 1)), w)
        out = weight_update(b, rng.standard_normal(1), SCALAR)
        assert abs(out.weights.sum() - 1.0) <= 1e-12
        assert np.all(out.weights >= 0.0)


class TestEss:
    def test_uniform(self):
        assert ess(np.full(17, 1.0 / 17)) == pytest.approx(17.0, rel=1e-12)

    def test_half_quarter_quarter(self):
        # 1 / (0.25 + 0.0625 + 0.0625) = 1 / 0.375, computed by hand.
        assert ess([0.5, 0.25, 0.25]) == pytest.approx(2.6666666666666665, rel=1e-12)

    @given(st.integers(0, 10**6))
    @settings(max_examples=30, deadline=None)
    def test_bounds(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 50))
        w = rng.random(n) + 1e-9
        w /= w.sum()
        assert 1.0 - 1e-9 <= ess(w) <= n + 1e-9


class TestSystematicResample:
    def test_uniform_weights_keep_every_particle_once(self):
        b = belief_of(np.arange(8.0).reshape(-1, 1), np.full(8, 0.125))
        out = systematic_resample(b, RandomStream(2))
        np.testing.assert_array_equal(np.sort(out.particles, axis=0), b.particles)
        assert np.all(out.weights == 0.125)

    def test_all_mass_on_one_particle(self):
        b = belief_of([[5.0], [7.0], [9.0]], [0.0, 1.0, 0.0])
        out = systematic_resample(b, RandomStream(4))
        assert np.all(out.particles == 7.0)

    def test_mean_preserved_over_many_resamplings(self):
        rng = np.random.default_rng(11)
        w = rng.random(40)
        w /= w.sum()
        b = belief_of(rng.standard_normal((40, 3)), w)
        target = weighted_mean(b)
        reps = 10_000
        means = np.empty((reps, 3))
        root = RandomStream(1234)
        for i in range(reps):
            means[i] = weighted_mean(systematic_resample(b, root.child(i)))
        se = means.std(axis=0, ddof=1) / math.sqrt(reps)
        assert np.all(np.abs(means.mean(axis=0) - target) < 3 * se + 1e-12)


class TestFilterStep:
    def test_threshold_zero_equals_predict_then_update(self):
        m = LinearGaussianModel([[0.8]], [[1.0]], [[1.0]], [[0.2]], [[0.5]])
        b = init_belief(Gaussian([0.0], [[1.0]]), 64, RandomStream(6))
        u, y = np.array([0.3]), np.array([0.4])
        s = RandomStream(7)
        stepped = filter_step(b, u, y, m, ResampleConfig(threshold=0.0), s)
        manual = weight_update(predict(b, u, m, s.child(0)), y, m)
        np.testing.assert_array_equal(stepped.particles, manual.particles)
        np.testing.assert_array_equal(stepped.weights, manual.weights)

    def test_threshold_one_always_resamples(self):
        m = LinearGaussianModel([[0.8]], [[1.0]], [[1.0]], [[0.2]], [[0.5]])
        b = init_belief(Gaussian([0.0], [[1.0]]), 64, RandomStream(8))
        out = filter_step(b, np.zeros(1), np.array([0.1]), m, ResampleConfig(threshold=1.0), RandomStream(9))
        assert np.all(out.weights == 1.0 / 64)

    def test_roughening_restores_particle_diversity(self):
        # A sharp likelihood concentrates the weights, so resampling clones a
        # handful of survivors; jitter must break the copies apart again.
        m = LinearGaussianModel([[1.0]], [[1.0]], [[1.0]], [[1e-6]], [[1e-4]])
        b = init_belief(Gaussian([0.0], [[4.0]]), 256, RandomStream(10))
        args = (b, np.zeros(1), np.array([0.3]), m)
        plain = filter_step(*args, ResampleConfig(threshold=1.0), RandomStream(11))
        rough = filter_step(*args, ResampleConfig(threshold=1.0, jitter=0.2), RandomStream(11))
        assert np.unique(plain.particles).size < 256
        assert np.unique(rough.particles).size == 256

    def test_roughening_scale_follows_sample_spread(self):
        # With jitter 1 the added noise has the per-axis sample deviation, so
        # the spread after roughening stays within a factor of sqrt(2).
        m = LinearGaussianModel([[1.0]], [[1.0]], [[1.0]], [[0.0]], [[25.0]])
        b = init_belief(Gaussian([0.0], [[9.0]]), 4000, RandomStream(12))
        out = filter_step(
            b, np.zeros(1), np.array([0.0]), m, ResampleConfig(threshold=1.0, jitter=1.0),
            RandomStream(13),
        )
        ratio = out.particles.std() / b.particles.std()
        assert 1.2 <= ratio <= 1.6

    def test_roughening_is_reproducible(self):
        m = LinearGaussianModel([[1.0]], [[1.0]], [[1.0]], [[0.1]], [[0.5]])
        b = init_belief(Gaussian([0.0], [[1.0]]), 64, RandomStream(14))
        cfg = ResampleConfig(threshold=1.0, jitter=0.3)
        a = filter_step(b, np.zeros(1), np.array([0.2]), m, cfg, RandomStream(15))
        c = filter_step(b, np.zeros(1), np.array([0.2]), m, cfg, RandomStream(15))
        np.testing.assert_array_equal(a.particles, c.particles)


class TestWeightedMean:
    def test_hand_value(self):
        b = belief_of([[4.0], [0.0]], [0.75, 0.25])
        assert weighted_mean(b) == pytest.approx(3.0, abs=0.0)

    def test_matches_dot_product(self):
        rng = np.random.default_rng(1)
        w = rng.random(9)
        w /= w.sum()
        b = belief_of(rng.standard_normal((9, 4)), w)
        np.testing.assert_allclose(weighted_mean(b), w @ b.particles, rtol=1e-15)


def test_belief_csv_round_trip_values(tmp_path):
    b = belief_of([[1.25, -2.5], [0.1, 3.0]], [0.625, 0.375])
    path = tmp_path / "belief.csv"
    save_belief_csv(b, path)
    rows = path.read_text().strip().splitlines()
    assert rows[0] == "x_1,x_2,weight"
    got = np.array([[float(v) for v in r.split(",")] for r in rows[1:]])
    np.testing.assert_array_equal(got[:, :2], b.particles)
    np.testing.assert_array_equal(got[:, 2], b.weights)
