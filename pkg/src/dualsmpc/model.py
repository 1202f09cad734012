"""Stochastic system interface shared by the filter, controller, and benchmarks.

A system is a Markov transition x' = f(x, u, xi) together with an observation
map y = h(x, eta).  Everything downstream (particle filter, information
recursion, drift checks, scenario rollouts) talks to models only through this
interface, so new applications plug in without touching the rest.
"""
from __future__ import annotations

import abc
import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

LOG_2PI = math.log(2.0 * math.pi)


class DimensionMismatch(ValueError):
    """An input vector does not match the model's declared dimensions."""


class ConfigurationError(ValueError):
    """Model or configuration parameters violate a documented requirement."""


@dataclass(frozen=True)
class RandomStream:
    """Counter-style randomness handle: (seed, key) fully determines the draws.

    Streams are values, not iterators.  Calling ``generator()`` twice on the
    same stream returns generators that produce identical sequences; use
    ``child()`` to derive independent sub-streams for separate purposes.
    """

    seed: int
    key: tuple[int, ...] = ()

    def child(self, *ids: int) -> "RandomStream":
        """Derive an independent sub-stream identified by integer ids."""
        return RandomStream(self.seed, self.key + tuple(int(i) for i in ids))

    def generator(self) -> np.random.Generator:
        return np.random.default_rng(
            np.random.SeedSequence(self.seed, spawn_key=self.key)
        )


class Gaussian:
    """Multivariate normal with cached factorizations.

    The covariance may be positive semidefinite; sampling then uses an
    eigenvalue factor.  Density evaluation requires a positive definite
    covariance and raises ConfigurationError otherwise.
    """

    def __init__(self, mean, cov):
        mean = np.atleast_1d(np.asarray(mean, dtype=float))
        cov = np.atleast_2d(np.asarray(cov, dtype=float))
        if mean.ndim != 1 or cov.shape != (mean.size, mean.size):
            raise DimensionMismatch(
                f"mean shape {mean.shape} incompatible with cov shape {cov.shape}"
            )
        if not np.all(np.isfinite(mean)) or not np.all(np.isfinite(cov)):
            raise ConfigurationError("Gaussian parameters must be finite")
        if not np.allclose(cov, cov.T, atol=1e-12):
            raise ConfigurationError("covariance must be symmetric")
        self.mean = mean
        self.cov = 0.5 * (cov + cov.T)
        self._chol = None
        try:
            self._chol = np.linalg.cholesky(self.cov)
        except np.linalg.LinAlgError:
            w, v = np.linalg.eigh(self.cov)
            if w.min() < -1e-10 * max(1.0, w.max()):
                raise ConfigurationError("covariance must be positive semidefinite")
            self._sqrt = v * np.sqrt(np.clip(w, 0.0, None))
        if self._chol is not None:
            self._sqrt = self._chol
            self._log_norm = -0.5 * (
                self.dim * LOG_2PI + 2.0 * np.sum(np.log(np.diag(self._chol)))
            )

    @property
    def dim(self) -> int:
        return self.mean.size

    def sample(self, gen: np.random.Generator, size=None) -> np.ndarray:
        """Draw one sample (size=None) or an array with leading shape ``size``."""
        shape = (self.dim,) if size is None else tuple(np.atleast_1d(size)) + (self.dim,)
        z = gen.standard_normal(shape)
        return self.mean + z @ self._sqrt.T

    def logpdf(self, x) -> np.ndarray:
        """Log density, vectorized over leading axes of ``x``."""
        if self._chol is None:
            raise ConfigurationError("density requires a positive definite covariance")
        x = np.asarray(x, dtype=float)
        r = np.atleast_2d(x - self.mean)
        lead = r.shape[:-1]
        w = solve_triangular(self._chol, r.reshape(-1, self.dim).T, lower=True)
        q = np.sum(w * w, axis=0).reshape(lead)
        out = self._log_norm - 0.5 * q
        return out if x.ndim > 1 else float(out[0])


class PointMass:
    """Degenerate noise law placing all mass on a single vector."""

    def __init__(self, value):
        self.value = np.atleast_1d(np.asarray(value, dtype=float))
        if not np.all(np.isfinite(self.value)):
            raise ConfigurationError("point mass value must be finite")

    @property
    def dim(self) -> int:
        return self.value.size

    def sample(self, gen: np.random.Generator, size=None) -> np.ndarray:
        if size is None:
            return self.value.copy()
        shape = tuple(np.atleast_1d(size)) + (self.dim,)
        return np.broadcast_to(self.value, shape).copy()


class SystemModel(abc.ABC):
    """Controlled Markov model with noisy observations.

    Subclasses implement the measurable maps ``dynamics`` and ``observation``
    plus the observation likelihood.  All three must accept arrays whose last
    axis is the respective vector dimension and broadcast over leading axes;
    the filter and the scenario rollouts rely on that for speed.
    """

    n_x: int
    n_u: int
    n_y: int
    dyn_noise: Gaussian | PointMass
    obs_noise: Gaussian | PointMass

    @abc.abstractmethod
    def dynamics(self, x, u, xi) -> np.ndarray:
        """Next state f(x, u, xi) for an explicit noise draw."""

    @abc.abstractmethod
    def observation(self, x, eta) -> np.ndarray:
        """Observation h(x, eta) for an explicit noise draw."""

    @abc.abstractmethod
    def log_likelihood(self, y, x) -> np.ndarray:
        """log p(y | x), vectorized over leading axes of ``x``."""

    def sample_dynamics(self, x, u, stream: RandomStream) -> np.ndarray:
        """Draw x' = f(x, u, xi) with xi from the model's process noise."""
        x = self._check_vec(x, self.n_x, "state")
        u = self._check_vec(u, self.n_u, "control")
        xi = self.dyn_noise.sample(stream.generator())
        return self.dynamics(x, u, xi)

    def sample_observation(self, x, stream: RandomStream) -> np.ndarray:
        """Draw y = h(x, eta) with eta from the model's observation noise."""
        x = self._check_vec(x, self.n_x, "state")
        eta = self.obs_noise.sample(stream.generator())
        return self.observation(x, eta)

    # Jacobian and covariance providers are optional; the information
    # recursion queries supports_information() before using them.
    def dynamics_jacobian(self, x, u) -> np.ndarray:
        raise NotImplementedError

    def observation_jacobian(self, x) -> np.ndarray:
        raise NotImplementedError

    def supports_information(self) -> bool:
        return False

    @staticmethod
    def _check_vec(v, dim: int, name: str) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        if v.shape[-1:] != (dim,):
            raise DimensionMismatch(f"{name} must have last axis {dim}, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise DimensionMismatch(f"{name} contains non-finite entries")
        return v


class AdditiveGaussianModel(SystemModel):
    """Model with additive noise: x' = f0(x, u) + xi, y = h0(x) + eta.

    Process and observation noises are zero-mean Gaussian (or point masses at
    zero for noise-free tests).  Subclasses provide the mean maps.
    """

    def __init__(self, n_x: int, n_u: int, n_y: int, Q, R):
        self.n_x = int(n_x)
        self.n_u = int(n_u)
        self.n_y = int(n_y)
        self.dyn_noise = self._make_noise(Q, self.n_x, "Q")
        self.obs_noise = self._make_noise(R, self.n_y, "R")

    @staticmethod
    def _make_noise(cov, dim: int, name: str):
        cov = np.atleast_2d(np.asarray(cov, dtype=float))
        if cov.shape != (dim, dim):
            raise DimensionMismatch(f"{name} must be {dim}x{dim}, got {cov.shape}")
        if np.all(cov == 0.0):
            return PointMass(np.zeros(dim))
        return Gaussian(np.zeros(dim), cov)

    @abc.abstractmethod
    def dynamics_mean(self, x, u) -> np.ndarray:
        """Noise-free next state f0(x, u)."""

    @abc.abstractmethod
    def observation_mean(self, x) -> np.ndarray:
        """Noise-free observation h0(x)."""

    def dynamics(self, x, u, xi) -> np.ndarray:
        return self.dynamics_mean(x, u) + xi

    def observation(self, x, eta) -> np.ndarray:
        return self.observation_mean(x) + eta

    def log_likelihood(self, y, x) -> np.ndarray:
        y = self._check_vec(y, self.n_y, "observation")
        x = np.asarray(x, dtype=float)
        resid = y - self.observation_mean(x)
        if isinstance(self.obs_noise, PointMass):
            match = np.all(np.abs(resid) <= 1e-12, axis=-1)
            return np.where(match, 0.0, -np.inf)
        return self.obs_noise.logpdf(resid + self.obs_noise.mean)

    @property
    def Q(self) -> np.ndarray:
        if isinstance(self.dyn_noise, PointMass):
            return np.zeros((self.n_x, self.n_x))
        return self.dyn_noise.cov

    @property
    def R(self) -> np.ndarray:
        if isinstance(self.obs_noise, PointMass):
            return np.zeros((self.n_y, self.n_y))
        return self.obs_noise.cov


class LinearGaussianModel(AdditiveGaussianModel):
    """Linear dynamics and observation with additive Gaussian noise.

    x' = A x + B u + xi,  y = H x + eta.  Used as the reference model for
    filter and information-recursion cross-checks against closed forms.
    """

    def __init__(self, A, B, H, Q, R):
        A = np.atleast_2d(np.asarray(A, dtype=float))
        B = np.atleast_2d(np.asarray(B, dtype=float))
        H = np.atleast_2d(np.asarray(H, dtype=float))
        n_x = A.shape[0]
        if A.shape != (n_x, n_x):
            raise DimensionMismatch("A must be square")
        if B.shape[0] != n_x:
            raise DimensionMismatch("B must have as many rows as A")
        if H.shape[1] != n_x:
            raise DimensionMismatch("H must have as many columns as A")
        super().__init__(n_x, B.shape[1], H.shape[0], Q, R)
        self.A = A
        self.B = B
        self.H = H

    def dynamics_mean(self, x, u) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        return x @ self.A.T + u @ self.B.T

    def observation_mean(self, x) -> np.ndarray:
        return np.asarray(x, dtype=float) @ self.H.T

    def dynamics_jacobian(self, x, u) -> np.ndarray:
        lead = np.asarray(x).shape[:-1]
        return np.broadcast_to(self.A, lead + self.A.shape)

    def observation_jacobian(self, x) -> np.ndarray:
        lead = np.asarray(x).shape[:-1]
        return np.broadcast_to(self.H, lead + self.H.shape)

    def supports_information(self) -> bool:
        return True


@dataclass(frozen=True)
class InformationRecord:
    """Accumulated information vector (y0, u0, y1, ..., u_{k-1}, yk).

    Immutable: ``append`` returns a new record.  After k appended steps the
    record holds k controls and k + 1 observations.
    """

    initial_observation: np.ndarray
    steps: tuple = ()

    def append(self, u, y) -> "InformationRecord":
        u = np.array(u, dtype=float, copy=True)
        y = np.array(y, dtype=float, copy=True)
        return InformationRecord(self.initial_observation, self.steps + ((u, y),))

    @property
    def time(self) -> int:
        return len(self.steps)

    @property
    def controls(self) -> tuple:
        return tuple(u for u, _ in self.steps)

    @property
    def observations(self) -> tuple:
        return (self.initial_observation,) + tuple(y for _, y in self.steps)


def append_information(record: InformationRecord, u, y) -> InformationRecord:
    """Functional alias for InformationRecord.append."""
    return record.append(u, y)
