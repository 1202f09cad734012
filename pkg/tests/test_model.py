"""Model interface: noise laws, sampling determinism, likelihoods, records."""
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad

from dualsmpc.model import (
    ConfigurationError,
    DimensionMismatch,
    Gaussian,
    InformationRecord,
    LinearGaussianModel,
    PointMass,
    RandomStream,
    append_information,
)

# Damped double integrator used across the test suite (dt = 1, damping 0.1).
A6 = np.block(
    [
        [np.eye(3), np.eye(3)],
        [np.zeros((3, 3)), 0.9 * np.eye(3)],
    ]
)
B6 = np.vstack([0.5 * np.eye(3), np.eye(3)])


def make_linear(q=0.0, r=0.0, H=None):
    H = np.eye(6) if H is None else H
    return LinearGaussianModel(A6, B6, H, q * np.eye(6), r * np.eye(H.shape[0]))


class TestRandomStream:
    def test_same_stream_same_draws(self):
        s = RandomStream(42, (1, 2))
        a = s.generator().standard_normal(8)
        b = s.generator().standard_normal(8)
        np.testing.assert_array_equal(a, b)

    def test_children_are_distinct(self):
        s = RandomStream(42)
        a = s.child(0).generator().standard_normal(8)
        b = s.child(1).generator().standard_normal(8)
        assert not np.array_equal(a, b)

    @given(st.integers(0, 2**31), st.integers(0, 100), st.integers(0, 100))
    @settings(max_examples=25, deadline=None)
    def test_child_reproducible(self, seed, i, j):
        x = RandomStream(seed).child(i, j).generator().random()
        y = RandomStream(seed).child(i, j).generator().random()
        assert x == y


class TestGaussian:
    def test_density_integrates_to_one(self):
        g = Gaussian([0.3], [[0.7]])
        total, err = quad(lambda y: math.exp(g.logpdf(np.array([y]))), -12, 12)
        assert abs(total - 1.0) < 1e-6

    def test_scalar_standard_normal_at_mean(self):
        g = Gaussian([0.0], [[1.0]])
        # -0.5 * log(2 pi), computed once by hand and frozen.
        assert g.logpdf(np.array([0.0])) == pytest.approx(-0.9189385332046727, abs=1e-12)

    def test_quadratic_form_matches_direct_formula(self):
        rng = np.random.default_rng(7)
        M = rng.standard_normal((3, 3))
        cov = M @ M.T + 0.5 * np.eye(3)
        g = Gaussian(np.zeros(3), cov)
        r = rng.standard_normal(3)
        direct = -0.5 * (r @ np.linalg.solve(cov, r) + math.log(np.linalg.det(2 * math.pi * cov)))
        assert g.logpdf(r) == pytest.approx(direct, rel=1e-12)

    def test_sample_moments(self):
        cov = np.array([[2.0, 0.6], [0.6, 1.0]])
        g = Gaussian([1.0, -2.0], cov)
        xs = g.sample(np.random.default_rng(0), 200_000)
        np.testing.assert_allclose(xs.mean(axis=0), [1.0, -2.0], atol=0.02)
        np.testing.assert_allclose(np.cov(xs.T), cov, atol=0.03)

    def test_semidefinite_sampling_allowed_density_rejected(self):
        g = Gaussian(np.zeros(2), np.zeros((2, 2)))
        np.testing.assert_array_equal(g.sample(np.random.default_rng(0)), np.zeros(2))
        with pytest.raises(ConfigurationError):
            g.logpdf(np.zeros(2))

    def test_indefinite_rejected(self):
        with pytest.raises(ConfigurationError):
            Gaussian(np.zeros(2), [[1.0, 0.0], [0.0, -1.0]])

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatch):
            Gaussian(np.zeros(2), np.eye(3))


class TestSampling:
    def test_deterministic_map_with_zero_noise(self):
        m = make_linear()
        x = np.array([0.0, 0.0, 0.0, 1.0, 0.0, 0.0])
        got = m.sample_dynamics(x, np.zeros(3), RandomStream(1))
        np.testing.assert_array_equal(got, [1.0, 0.0, 0.0, 0.9, 0.0, 0.0])

    def test_same_stream_identical_draw(self):
        m = make_linear(q=0.3)
        x = np.arange(6.0)
        s = RandomStream(9, (4,))
        a = m.sample_dynamics(x, np.ones(3), s)
        b = m.sample_dynamics(x, np.ones(3), s)
        np.testing.assert_array_equal(a, b)

    def test_zero_observation_noise_returns_mean(self):
        m = make_linear()
        x = np.arange(6.0)
        np.testing.assert_array_equal(m.sample_observation(x, RandomStream(0)), x)

    def test_control_affects_next_state(self):
        m = make_linear()
        x = np.zeros(6)
        got = m.sample_dynamics(x, np.array([2.0, 0.0, 0.0]), RandomStream(0))
        np.testing.assert_allclose(got, [1.0, 0.0, 0.0, 2.0, 0.0, 0.0])

    def test_dimension_checks(self):
        m = make_linear()
        with pytest.raises(DimensionMismatch):
            m.sample_dynamics(np.zeros(5), np.zeros(3), RandomStream(0))
        with pytest.raises(DimensionMismatch):
            m.sample_dynamics(np.zeros(6), np.zeros(2), RandomStream(0))
        with pytest.raises(DimensionMismatch):
            m.sample_dynamics(np.full(6, np.nan), np.zeros(3), RandomStream(0))


class TestLogLikelihood:
    def test_scalar_standard_normal(self):
        m = LinearGaussianModel([[1.0]], [[0.0]], [[1.0]], [[0.0]], [[1.0]])
        ll = m.log_likelihood(np.array([0.7]), np.array([0.7]))
        assert ll == pytest.approx(-0.9189385332046727, abs=1e-12)

    def test_vectorized_over_particles(self):
        m = make_linear(r=0.5)
        xs = np.random.default_rng(3).standard_normal((11, 6))
        y = np.ones(6)
        lls = m.log_likelihood(y, xs)
        assert lls.shape == (11,)
        for i in range(11):
            assert lls[i] == pytest.approx(float(m.log_likelihood(y, xs[i])), rel=1e-12)

    def test_point_mass_observation_noise(self):
        m = make_linear()
        x = np.arange(6.0)
        assert m.log_likelihood(x.copy(), x) == 0.0
        assert m.log_likelihood(x + 1.0, x) == -np.inf


class TestInformationRecord:
    @given(st.integers(0, 20))
    @settings(max_examples=20, deadline=None)
    def test_length_pattern(self, k):
        rec = InformationRecord(np.zeros(2))
        for i in range(k):
            rec = append_information(rec, np.full(3, i), np.full(2, i))
        assert rec.time == k
        assert len(rec.controls) == k
        assert len(rec.observations) == k + 1

    def test_append_is_pure(self):
        rec = InformationRecord(np.zeros(1))
        rec2 = rec.append(np.ones(1), np.ones(1))
        assert rec.time == 0
        assert rec2.time == 1
        np.testing.assert_array_equal(rec2.observations[1], [1.0])
