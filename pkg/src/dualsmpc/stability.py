"""Geometric drift machinery: Lyapunov values, target sets, fallback control.

The Lyapunov function family is V(x) = exp(||W x||) for a configurable linear
weighting W (identity by default, or a sub-vector selection).  All drift
arithmetic stays in the log domain, where log V is just the weighted norm, so
thousand-unit states never overflow.

If the one-step drift E[V(next)] <= lam * V(x) holds everywhere outside a
ball C and E[V] is bounded on C by b, then along the closed loop
E[V(X_k)] <= lam^k V(x0) + b / (1 - lam).  calibrate_target_set searches for
the smallest such ball under the fallback policy and estimates b;
verify_drift_bound checks the trajectory bound by Monte Carlo.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_discrete_are
from scipy.special import logsumexp

from .model import ConfigurationError, DimensionMismatch, RandomStream, SystemModel


class StabilizationInfeasible(RuntimeError):
    """No radius on the search grid makes the fallback drift test pass."""


@dataclass(frozen=True)
class LyapunovSpec:
    """V(x) = exp(||W x[idx]||).  weight=None means the identity map."""

    form: str = "exp_norm"
    weight: np.ndarray | None = None
    indices: tuple | None = None

    def __post_init__(self):
        if self.form != "exp_norm":
            raise ConfigurationError(f"unknown Lyapunov form: {self.form!r}")
        if self.weight is not None:
            W = np.atleast_2d(np.asarray(self.weight, dtype=float))
            if not np.all(np.isfinite(W)):
                raise ConfigurationError("Lyapunov weight must be finite")
            object.__setattr__(self, "weight", W)
        if self.indices is not None:
            object.__setattr__(self, "indices", tuple(int(i) for i in self.indices))


def log_v(spec: LyapunovSpec, x) -> np.ndarray:
    """log V(x) = ||W x||; broadcasts over leading axes."""
    z = np.asarray(x, dtype=float)
    if spec.indices is not None:
        z = z[..., list(spec.indices)]
    if spec.weight is not None:
        z = z @ spec.weight.T
    out = np.linalg.norm(z, axis=-1)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class TargetSet:
    """Closed Euclidean ball around the (recentred) goal state."""

    center: np.ndarray
    radius: float

    def __post_init__(self):
        c = np.atleast_1d(np.asarray(self.center, dtype=float))
        if not np.all(np.isfinite(c)) or not self.radius > 0.0:
            raise ConfigurationError("target set needs a finite center and positive radius")
        object.__setattr__(self, "center", c)

    def contains(self, x) -> np.ndarray:
        d = np.linalg.norm(np.asarray(x, dtype=float) - self.center, axis=-1)
        out = d <= self.radius
        return bool(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class DriftConfig:
    """Contraction factor, Monte-Carlo draw count, and feasibility slack."""

    lam: float = 0.95
    n_draws: int = 64
    tol: float = 1e-6

    def __post_init__(self):
        if not 0.0 < self.lam < 1.0:
            raise ConfigurationError("drift factor must lie in (0, 1)")
        if self.n_draws < 1 or self.tol < 0.0:
            raise ConfigurationError("need n_draws >= 1 and tol >= 0")


@dataclass(frozen=True)
class FallbackPolicy:
    """Saturated linear feedback u = -K x clipped to the control ball."""

    K: np.ndarray
    u_max: float

    def __post_init__(self):
        K = np.atleast_2d(np.asarray(self.K, dtype=float))
        if not np.all(np.isfinite(K)) or not self.u_max > 0.0:
            raise ConfigurationError("fallback gain must be finite with positive bound")
        object.__setattr__(self, "K", K)


def alpha(policy: FallbackPolicy, x) -> np.ndarray:
    """Apply the saturated feedback; broadcasts over leading axes."""
    u = -np.asarray(x, dtype=float) @ policy.K.T
    n = np.linalg.norm(u, axis=-1, keepdims=True)
    scale = np.where(n > policy.u_max, policy.u_max / np.where(n > 0, n, 1.0), 1.0)
    return u * scale


def dlqr_gain(A, B, Q, R) -> np.ndarray:
    """Discrete-time LQ regulator gain for x' = A x + B u."""
    A, B, Q, R = (np.atleast_2d(np.asarray(m, dtype=float)) for m in (A, B, Q, R))
    P = solve_discrete_are(A, B, Q, R)
    return np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)


def double_integrator_weight(
    n_axes: int, damping: float, blend_scale: float, speed_scale: float
) -> np.ndarray:
    """Lyapunov weight for per-axis dynamics p' = p + dt v, v' = (1 - damping dt) v + dt u.

    Rows come in two blocks.  The blend block blend_scale * (damping * p + v)
    tracks the combination that the drift leaves invariant under zero control,
    so only control effort moves it.  The speed block speed_scale * v contracts
    geometrically at rate (1 - damping dt) on its own.  Together ||W x|| is a
    norm on the (p, v) state whenever both scales are positive.
    """
    if n_axes < 1 or damping <= 0.0 or blend_scale <= 0.0 or speed_scale <= 0.0:
        raise ConfigurationError("need n_axes >= 1 and positive damping and scales")
    eye = np.eye(n_axes)
    zero = np.zeros((n_axes, n_axes))
    return np.block(
        [[blend_scale * damping * eye, blend_scale * eye], [zero, speed_scale * eye]]
    )


def drift_lhs_log(model: SystemModel, spec: LyapunovSpec, x_hat, u0, draws) -> float:
    """log of the empirical mean of V(f(x_hat, u0, xi)) over explicit draws."""
    draws = np.asarray(draws, dtype=float)
    if draws.ndim != 2:
        raise DimensionMismatch("draws must be a (n_draws, n_xi) array")
    x_hat = np.asarray(x_hat, dtype=float)
    u0 = np.asarray(u0, dtype=float)
    nxt = model.dynamics(x_hat, u0, draws)
    logs = log_v(spec, nxt)
    return float(logsumexp(logs) - math.log(draws.shape[0]))


def drift_satisfied(lhs_log: float, spec: LyapunovSpec, x_hat, cfg: DriftConfig) -> bool:
    """Check lhs <= lam * V(x_hat) in the log domain, with slack cfg.tol."""
    return lhs_log <= math.log(cfg.lam) + log_v(spec, x_hat) + cfg.tol


@dataclass(frozen=True)
class CalibrationConfig:
    """Search controls for calibrate_target_set."""

    radius_min: float = 0.5
    radius_max: float = 500.0
    n_radii: int = 28
    n_directions: int = 24
    shell_factors: tuple = (1.001, 1.5, 2.5, 5.0, 10.0)
    interior_fractions: tuple = (0.0, 0.35, 0.7, 1.0)
    n_mc: int = 2048
    extra_directions: tuple = ()

    def __post_init__(self):
        if not 0.0 < self.radius_min < self.radius_max:
            raise ConfigurationError("need 0 < radius_min < radius_max")
        if self.n_radii < 1 or self.n_mc < 2:
            raise ConfigurationError("need n_radii >= 1 and n_mc >= 2")
        if self.extra_directions:
            rows = tuple(tuple(float(v) for v in row) for row in self.extra_directions)
            for row in rows:
                if not any(v != 0.0 for v in row):
                    raise ConfigurationError("extra directions must be nonzero")
            object.__setattr__(self, "extra_directions", rows)


@dataclass(frozen=True)
class CalibrationResult:
    radius: float
    log_b: float
    checked_points: int


def _unit_directions(
    n_x: int, extra: int, stream: RandomStream, fixed: tuple = ()
) -> np.ndarray:
    """Deterministic direction set: all +-axes, caller extras, seeded random units."""
    blocks = [np.eye(n_x), -np.eye(n_x)]
    if fixed:
        d = np.asarray(fixed, dtype=float).reshape(len(fixed), n_x)
        blocks.append(d / np.linalg.norm(d, axis=1, keepdims=True))
    if extra > 0:
        g = stream.generator()
        z = g.standard_normal((extra, n_x))
        blocks.append(z / np.linalg.norm(z, axis=1, keepdims=True))
    return np.vstack(blocks)


def _mc_log_mean_v(model, spec, points, policy, n_mc, stream):
    """Monte-Carlo log E[V] one step ahead from each point under the fallback.

    Returns (est_log, se_rel) arrays; se_rel is the relative standard error,
    which by the delta method is also the standard error of est_log.
    """
    points = np.atleast_2d(points)
    u = alpha(policy, points)
    draws = model.dyn_noise.sample(stream.generator(), (points.shape[0], n_mc))
    nxt = model.dynamics(points[:, None, :], u[:, None, :], draws)
    logs = log_v(spec, nxt)
    shift = logs.max(axis=1, keepdims=True)
    v = np.exp(logs - shift)
    mu = v.mean(axis=1)
    sd = v.std(axis=1, ddof=1)
    est_log = shift[:, 0] + np.log(mu)
    se_rel = sd / (math.sqrt(n_mc) * mu)
    return est_log, se_rel


def calibrate_target_set(
    model: SystemModel,
    policy: FallbackPolicy,
    spec: LyapunovSpec,
    lam: float,
    stream: RandomStream,
    cfg: CalibrationConfig = CalibrationConfig(),
) -> CalibrationResult:
    """Find the smallest grid radius whose exterior passes the drift test.

    For each candidate radius, deterministic shell points outside the ball
    are tested for E[V(next)] <= lam * V(point) with a 3-standard-error
    margin under the fallback policy.  The bound b on E[V(next)] inside the
    selected ball is then estimated on an interior grid, inflated by 3
    standard errors.
    """
    if not 0.0 < lam < 1.0:
        raise ConfigurationError("drift factor must lie in (0, 1)")
    dirs = _unit_directions(
        model.n_x, cfg.n_directions, stream.child(0), cfg.extra_directions
    )
    radii = np.geomspace(cfg.radius_min, cfg.radius_max, cfg.n_radii)
    log_lam = math.log(lam)
    checked = 0
    selected = None
    for i, r in enumerate(radii):
        ok = True
        for j, f in enumerate(cfg.shell_factors):
            points = r * f * dirs
            est_log, se_rel = _mc_log_mean_v(
                model, spec, points, policy, cfg.n_mc, stream.child(1, i, j)
            )
            checked += len(points)
            margin = est_log + np.log1p(3.0 * se_rel)
            if np.any(margin > log_lam + log_v(spec, points)):
                ok = False
                break
        if ok:
            selected = float(r)
            break
    if selected is None:
        raise StabilizationInfeasible(
            f"fallback drift test failed at every radius in "
            f"[{cfg.radius_min:g}, {cfg.radius_max:g}]"
        )
    interior = np.vstack([fr * selected * dirs for fr in cfg.interior_fractions])
    est_log, se_rel = _mc_log_mean_v(model, spec, interior, policy, cfg.n_mc, stream.child(2))
    log_b = float(np.max(est_log + np.log1p(3.0 * se_rel)))
    return CalibrationResult(radius=selected, log_b=log_b, checked_points=checked)


@dataclass(frozen=True)
class DriftReport:
    """Per-step comparison of Monte-Carlo E[V(X_k)] against the drift bound."""

    step: np.ndarray
    estimate_logV: np.ndarray
    stderr: np.ndarray
    bound_logV: np.ndarray
    passed: np.ndarray

    @property
    def all_pass(self) -> bool:
        return bool(np.all(self.passed))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "estimate_logV", "stderr", "bound_logV", "pass"])
            for k in range(len(self.step)):
                writer.writerow(
                    [
                        int(self.step[k]),
                        repr(float(self.estimate_logV[k])),
                        repr(float(self.stderr[k])),
                        repr(float(self.bound_logV[k])),
                        bool(self.passed[k]),
                    ]
                )


def verify_drift_bound(
    model: SystemModel,
    policy: FallbackPolicy,
    spec: LyapunovSpec,
    x0,
    lam: float,
    log_b: float,
    horizon: int,
    runs: int,
    stream: RandomStream,
) -> DriftReport:
    """Simulate the fallback loop and compare E[V(X_k)] to the drift bound.

    The bound is lam^k V(x0) + b / (1 - lam); a step passes when the
    Monte-Carlo estimate does not exceed it by more than 3 standard errors.
    All comparisons happen in the log domain.
    """
    x0 = np.asarray(x0, dtype=float)
    logv0 = log_v(spec, x0)
    log_floor = log_b - math.log1p(-lam)
    X = np.broadcast_to(x0, (runs, x0.size)).copy()
    steps = [0]
    est = [logv0]
    se = [0.0]
    bounds = [float(np.logaddexp(logv0, log_floor))]
    passed = [est[0] <= bounds[0] + 1e-12]
    for k in range(1, horizon + 1):
        u = alpha(policy, X)
        xi = model.dyn_noise.sample(stream.child(k).generator(), runs)
        X = model.dynamics(X, u, xi)
        logs = log_v(spec, X)
        shift = logs.max()
        v = np.exp(logs - shift)
        mu = v.mean()
        sd = v.std(ddof=1)
        est_log = shift + math.log(mu)
        se_rel = sd / (math.sqrt(runs) * mu) if mu > 0 else 0.0
        bound_log = float(np.logaddexp(k * math.log(lam) + logv0, log_floor))
        if se_rel > 0:
            limit = float(np.logaddexp(bound_log, math.log(3.0 * se_rel) + est_log))
        else:
            limit = bound_log + 1e-12
        steps.append(k)
        est.append(est_log)
        se.append(se_rel)
        bounds.append(bound_log)
        passed.append(est_log <= limit)
    return DriftReport(
        step=np.array(steps),
        estimate_logV=np.array(est),
        stderr=np.array(se),
        bound_logV=np.array(bounds),
        passed=np.array(passed),
    )
