"""Particle filter: weighted-sample beliefs with adaptive systematic resampling.

Weight updates run in the log domain with a max shift so that very unlikely
observations degrade gracefully instead of underflowing to a zero belief.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .model import DimensionMismatch, RandomStream, SystemModel

# Below this shifted log-weight, exp() underflows in double precision.
DEGENERATE_LOG_WEIGHT = -700.0

_PREDICT, _RESAMPLE, _ROUGHEN = 0, 1, 2


class DegenerateBelief(RuntimeError):
    """All particle weights underflowed to zero; the filter has diverged."""


@dataclass(frozen=True)
class ParticleBelief:
    """Immutable weighted particle set: particles (N, n_x), weights (N,)."""

    particles: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.particles, dtype=float)
        w = np.asarray(self.weights, dtype=float)
        if p.ndim != 2 or p.shape[0] < 1:
            raise DimensionMismatch(f"particles must be (N, n_x) with N >= 1, got {p.shape}")
        if w.shape != (p.shape[0],):
            raise DimensionMismatch(f"weights shape {w.shape} does not match N = {p.shape[0]}")
        if not np.all(np.isfinite(p)) or not np.all(np.isfinite(w)):
            raise DimensionMismatch("particles and weights must be finite")
        if np.any(w < 0.0) or abs(w.sum() - 1.0) > 1e-12:
            raise DimensionMismatch("weights must be nonnegative and sum to 1 within 1e-12")
        object.__setattr__(self, "particles", p)
        object.__setattr__(self, "weights", w)

    @property
    def n(self) -> int:
        return self.particles.shape[0]

    @property
    def dim(self) -> int:
        return self.particles.shape[1]


@dataclass(frozen=True)
class ResampleConfig:
    """Resample when ESS < threshold * N.  threshold = 0 disables resampling.

    jitter > 0 roughens after each resample: every coordinate gets Gaussian
    noise scaled by jitter times its sample standard deviation, which restores
    the diversity that duplication destroys under sharp likelihoods.
    """

    threshold: float = 0.5
    method: str = "systematic"
    jitter: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.threshold <= 1.0:
            raise DimensionMismatch("resample threshold must lie in [0, 1]")
        if self.method != "systematic":
            raise DimensionMismatch(f"unknown resampling method: {self.method!r}")
        if self.jitter < 0.0:
            raise DimensionMismatch("roughening jitter must be nonnegative")


def init_belief(prior, n: int, stream: RandomStream) -> ParticleBelief:
    """Draw n equally weighted particles from a prior with a .sample method."""
    if n < 1:
        raise DimensionMismatch("particle count must be at least 1")
    sampler = prior.sample if hasattr(prior, "sample") else prior
    particles = np.asarray(sampler(stream.generator(), n), dtype=float)
    return ParticleBelief(particles, np.full(n, 1.0 / n))


def predict(belief: ParticleBelief, u, model: SystemModel, stream: RandomStream) -> ParticleBelief:
    """Propagate every particle through the dynamics with independent noise."""
    u = model._check_vec(u, model.n_u, "control")
    xi = model.dyn_noise.sample(stream.generator(), belief.n)
    return ParticleBelief(model.dynamics(belief.particles, u, xi), belief.weights)


def weight_update(belief: ParticleBelief, y, model: SystemModel) -> ParticleBelief:
    """Multiply weights by the observation likelihood and renormalize."""
    logw = np.log(belief.weights) + model.log_likelihood(y, belief.particles)
    logw = np.where(np.isnan(logw), -np.inf, logw)
    shift = np.max(logw)
    if not np.isfinite(shift) or shift < DEGENERATE_LOG_WEIGHT:
        raise DegenerateBelief(
            "all particle weights underflowed; observation is inconsistent with the belief"
        )
    w = np.exp(logw - shift)
    w /= w.sum()
    return ParticleBelief(belief.particles, w)


def ess(weights) -> float:
    """Effective sample size 1 / sum(w^2) of normalized weights."""
    w = np.asarray(weights, dtype=float)
    return float(1.0 / np.sum(w * w))


def systematic_resample(belief: ParticleBelief, stream: RandomStream) -> ParticleBelief:
    """Low-variance resampling with a single uniform offset."""
    n = belief.n
    offset = stream.generator().random()
    positions = (np.arange(n) + offset) / n
    cumulative = np.cumsum(belief.weights)
    cumulative[-1] = 1.0
    idx = np.searchsorted(cumulative, positions, side="right")
    return ParticleBelief(belief.particles[idx], np.full(n, 1.0 / n))


def filter_step(
    belief: ParticleBelief,
    u,
    y,
    model: SystemModel,
    cfg: ResampleConfig,
    stream: RandomStream,
) -> ParticleBelief:
    """One predict / update / adaptive-resample cycle."""
    belief = predict(belief, u, model, stream.child(_PREDICT))
    belief = weight_update(belief, y, model)
    if ess(belief.weights) < cfg.threshold * belief.n:
        belief = systematic_resample(belief, stream.child(_RESAMPLE))
        if cfg.jitter > 0.0:
            scale = cfg.jitter * belief.particles.std(axis=0)
            noise = stream.child(_ROUGHEN).generator().standard_normal(belief.particles.shape)
            belief = ParticleBelief(belief.particles + noise * scale, belief.weights)
    return belief


def weighted_mean(belief: ParticleBelief) -> np.ndarray:
    """Posterior mean estimate sum_l w_l x_l."""
    return belief.weights @ belief.particles


def save_belief_csv(belief: ParticleBelief, path) -> None:
    """Dump particles and weights for debugging: columns x_1..x_n, weight."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"x_{i + 1}" for i in range(belief.dim)] + ["weight"])
        for row, w in zip(belief.particles, belief.weights):
            writer.writerow([repr(float(v)) for v in row] + [repr(float(w))])
