"""Scenario-based receding-horizon control with information and drift shaping.

Planning works on a scenario set drawn from the current particle belief:
common process-noise draws are frozen per solve, so every candidate control
sequence is scored on the same futures and finite differences stay smooth.
Three policy kinds share one rollout engine.  "ce-lq" is a certainty
equivalent quadratic regulator.  "fisher-distance" adds an information cost
propagated through the Fisher recursion.  "fisher-lyapunov" couples the
information cost with a one-step geometric drift constraint on the first
control, enforced by an augmented Lagrangian; when no feasible sequence is
found the caller falls back to the stabilizing feedback.

The optimizer is projected gradient descent over the per-stage control ball
with central finite differences.  All probe sequences and backtracking
candidates are stacked into one leading batch axis, so each iteration costs a
handful of vectorized rollouts rather than hundreds of scalar ones.
"""
from __future__ import annotations

import csv
import hashlib
import json
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import logsumexp

from .fim import InfoCostConfig, fim_init, fim_step, info_cost
from .model import ConfigurationError, DimensionMismatch, RandomStream, SystemModel
from .pfilter import (
    DegenerateBelief,
    ParticleBelief,
    ResampleConfig,
    filter_step,
    init_belief,
    systematic_resample,
    weight_update,
    weighted_mean,
)
from .pfilter import ess as effective_sample_size
from .stability import DriftConfig, FallbackPolicy, LyapunovSpec, TargetSet, alpha, log_v

POLICY_KINDS = ("ce-lq", "fisher-lyapunov", "fisher-distance")

SOLVED_STATUSES = ("optimal-local", "feasible-maxiter")


@dataclass(frozen=True)
class ScenarioSet:
    """Frozen belief samples and noise draws shared by one planning solve."""

    states: np.ndarray
    weights: np.ndarray
    noise: np.ndarray
    drift_draws: np.ndarray
    fim0: np.ndarray | None = None

    def __post_init__(self):
        states = np.atleast_2d(np.asarray(self.states, dtype=float))
        weights = np.atleast_1d(np.asarray(self.weights, dtype=float))
        noise = np.asarray(self.noise, dtype=float)
        draws = np.atleast_2d(np.asarray(self.drift_draws, dtype=float))
        if weights.shape != (states.shape[0],):
            raise DimensionMismatch("one weight per scenario state is required")
        if np.any(weights < 0.0) or abs(weights.sum() - 1.0) > 1e-9:
            raise DimensionMismatch("scenario weights must be a distribution")
        if noise.ndim != 3 or noise.shape[0] != states.shape[0]:
            raise DimensionMismatch("noise must have shape (n_scenarios, horizon, n_xi)")
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "noise", noise)
        object.__setattr__(self, "drift_draws", draws)
        if self.fim0 is not None:
            fim0 = np.atleast_2d(np.asarray(self.fim0, dtype=float))
            if fim0.shape != (states.shape[1], states.shape[1]):
                raise DimensionMismatch("fim0 must be n_x by n_x")
            object.__setattr__(self, "fim0", fim0)

    @property
    def n_scenarios(self) -> int:
        return self.states.shape[0]

    @property
    def horizon(self) -> int:
        return self.noise.shape[1]


def extract_scenarios(
    belief: ParticleBelief,
    model: SystemModel,
    horizon: int,
    n_scenarios: int,
    stream: RandomStream,
    n_drift_draws: int = 64,
    ridge: float = 1e-6,
    with_information: bool = True,
) -> ScenarioSet:
    """Subsample the belief and freeze noise draws for one solve.

    Scenario states come from a systematic draw over the particle weights, so
    with uniform weights and n_scenarios equal to the particle count every
    particle appears exactly once.  The initial information matrix is the
    inverse of the ridge-regularized belief covariance.
    """
    if horizon < 1 or n_scenarios < 1 or n_drift_draws < 1:
        raise ConfigurationError("horizon, n_scenarios, n_drift_draws must be >= 1")
    if n_scenarios > belief.n:
        raise ConfigurationError("cannot extract more scenarios than particles")
    offset = stream.child(0).generator().random()
    positions = (np.arange(n_scenarios) + offset) / n_scenarios
    cumulative = np.cumsum(belief.weights)
    cumulative[-1] = 1.0
    idx = np.searchsorted(cumulative, positions, side="right")
    states = belief.particles[idx]
    weights = np.full(n_scenarios, 1.0 / n_scenarios)
    noise = model.dyn_noise.sample(stream.child(1).generator(), (n_scenarios, horizon))
    draws = model.dyn_noise.sample(stream.child(2).generator(), n_drift_draws)
    fim0 = None
    if with_information:
        mu = weighted_mean(belief)
        centered = belief.particles - mu
        cov = np.einsum("l,li,lj->ij", belief.weights, centered, centered)
        fim0 = fim_init(cov + ridge * np.eye(cov.shape[0]))
    return ScenarioSet(states, weights, noise, draws, fim0)


@dataclass(frozen=True)
class ProblemSpec:
    """One receding-horizon planning problem: costs, bounds, and safety terms."""

    horizon: int
    u_max: float
    target: TargetSet
    policy: str = "ce-lq"
    M_u: np.ndarray = field(default_factory=lambda: np.eye(1))
    M_x: np.ndarray | None = None
    info: InfoCostConfig = field(default_factory=InfoCostConfig)
    drift: DriftConfig = field(default_factory=DriftConfig)
    lyap: LyapunovSpec = field(default_factory=LyapunovSpec)
    n_scenarios: int = 20
    scenario_ridge: float = 1e-6

    def __post_init__(self):
        if self.policy not in POLICY_KINDS:
            raise ConfigurationError(
                f"unknown policy {self.policy!r}; expected one of {POLICY_KINDS}"
            )
        if self.horizon < 1 or not self.u_max > 0.0 or self.n_scenarios < 1:
            raise ConfigurationError("need horizon >= 1, u_max > 0, n_scenarios >= 1")
        if not isinstance(self.target, TargetSet):
            raise ConfigurationError("a TargetSet is required")
        M_u = np.atleast_2d(np.asarray(self.M_u, dtype=float))
        if M_u.shape[0] != M_u.shape[1] or not np.all(np.isfinite(M_u)):
            raise ConfigurationError("M_u must be a finite square matrix")
        object.__setattr__(self, "M_u", M_u)
        if self.M_x is not None:
            M_x = np.atleast_2d(np.asarray(self.M_x, dtype=float))
            if M_x.shape[0] != M_x.shape[1] or not np.all(np.isfinite(M_x)):
                raise ConfigurationError("M_x must be a finite square matrix")
            object.__setattr__(self, "M_x", M_x)
        if self.policy in ("ce-lq", "fisher-distance") and self.M_x is None:
            raise ConfigurationError(f"policy {self.policy!r} requires M_x")

    def needs_information(self) -> bool:
        return self.policy in ("fisher-lyapunov", "fisher-distance")


@dataclass(frozen=True)
class SolverConfig:
    """Iteration budgets and step control for the projected-gradient solver."""

    max_outer: int = 6
    max_inner: int = 30
    step_init: float = 1.0
    backtrack: float = 0.5
    n_backtracks: int = 12
    armijo: float = 1e-4
    fd_eps: float = 1e-5
    ftol: float = 1e-9
    rho_init: float = 10.0
    rho_growth: float = 4.0
    n_random_starts: int = 1
    early_exit: bool = False

    def __post_init__(self):
        if self.max_outer < 1 or self.max_inner < 1 or self.n_backtracks < 1:
            raise ConfigurationError("iteration budgets must be >= 1")
        if not 0.0 < self.backtrack < 1.0 or not self.fd_eps > 0.0:
            raise ConfigurationError("need 0 < backtrack < 1 and fd_eps > 0")


@dataclass(frozen=True)
class SolverResult:
    controls: np.ndarray
    objective: float
    status: str
    drift_slack: float
    info_value: float
    n_evals: int


def project_controls(U, u_max: float) -> np.ndarray:
    """Scale each stage control onto the norm ball; broadcasts over leading axes."""
    U = np.asarray(U, dtype=float)
    n = np.linalg.norm(U, axis=-1, keepdims=True)
    scale = np.where(n > u_max, u_max / np.where(n > 0.0, n, 1.0), 1.0)
    return U * scale


class _Rollout:
    """Batched objective and drift evaluations for one planning instance."""

    def __init__(self, model, spec: ProblemSpec, scen: ScenarioSet, x_hat):
        self.model = model
        self.spec = spec
        self.scen = scen
        self.x_hat = np.asarray(x_hat, dtype=float)
        self.center = spec.target.center
        self.n_evals = 0
        self.with_info = spec.needs_information()
        if self.with_info:
            if not model.supports_information():
                raise ConfigurationError(
                    "information-seeking policies need observation Jacobians"
                )
            if scen.fim0 is None:
                raise ConfigurationError("scenario set lacks an initial information matrix")
            self.Q_inv = np.linalg.inv(model.Q)
            self.R_inv = np.linalg.inv(model.R)

    def objective(self, U) -> np.ndarray:
        """Expected cost of control batches U with shape (P, T, n_u)."""
        U = np.asarray(U, dtype=float)
        spec, scen = self.spec, self.scen
        P = U.shape[0]
        self.n_evals += P
        cost = np.einsum("pti,ij,ptj->p", U, spec.M_u, U)
        X = np.broadcast_to(scen.states, (P,) + scen.states.shape)
        if self.with_info:
            J = np.broadcast_to(scen.fim0, (P, scen.n_scenarios) + scen.fim0.shape)
        T = spec.horizon
        for k in range(T):
            u_k = U[:, None, k, :]
            if self.with_info:
                F = self.model.dynamics_jacobian(X, u_k)
            X = self.model.dynamics(X, u_k, scen.noise[:, k, :])
            if self.with_info:
                H = self.model.observation_jacobian(X)
                J = fim_step(J, F, H, self.Q_inv, self.R_inv)
                w = spec.info.w_term if k == T - 1 else spec.info.w_stage
                if w != 0.0:
                    cost = cost + w * (info_cost(J, spec.info) @ scen.weights)
            if spec.policy == "ce-lq":
                d = X - self.center
                cost = cost + np.einsum("psi,ij,psj->ps", d, spec.M_x, d) @ scen.weights
        if spec.policy == "fisher-distance":
            d = X - self.center
            cost = cost + np.einsum("psi,ij,psj->ps", d, spec.M_x, d) @ scen.weights
        return cost

    def drift_gap(self, U) -> np.ndarray:
        """log E[V(next)] - log(lam V(x_hat)) for the first stage of each batch row."""
        U = np.asarray(U, dtype=float)
        nxt = self.model.dynamics(
            self.x_hat, U[:, None, 0, :], self.scen.drift_draws
        )
        lv = log_v(self.spec.lyap, nxt - self.center)
        lhs = logsumexp(lv, axis=-1) - math.log(self.scen.drift_draws.shape[0])
        rhs = math.log(self.spec.drift.lam) + log_v(self.spec.lyap, self.x_hat - self.center)
        return lhs - rhs

    def merit(self, U, mu: float, rho: float) -> np.ndarray:
        """Objective plus the augmented-Lagrangian penalty for the drift gap."""
        c = self.drift_gap(U)
        shifted = np.maximum(0.0, mu + rho * c)
        return self.objective(U) + (shifted * shifted - mu * mu) / (2.0 * rho)

    def terminal_info(self, U) -> float:
        """Scenario-averaged terminal information cost of a single sequence."""
        if not self.with_info:
            return float("nan")
        U = np.asarray(U, dtype=float)[None]
        scen = self.scen
        X = np.broadcast_to(scen.states, (1,) + scen.states.shape)
        J = np.broadcast_to(scen.fim0, (1, scen.n_scenarios) + scen.fim0.shape)
        for k in range(self.spec.horizon):
            u_k = U[:, None, k, :]
            F = self.model.dynamics_jacobian(X, u_k)
            X = self.model.dynamics(X, u_k, scen.noise[:, k, :])
            H = self.model.observation_jacobian(X)
            J = fim_step(J, F, H, self.Q_inv, self.R_inv)
        return float((info_cost(J, self.spec.info) @ scen.weights)[0])


def rollout_objective(model, spec: ProblemSpec, scen: ScenarioSet, x_hat, controls):
    """Public objective evaluation; accepts (T, n_u) or a batch (P, T, n_u)."""
    U = np.asarray(controls, dtype=float)
    single = U.ndim == 2
    roll = _Rollout(model, spec, scen, x_hat)
    vals = roll.objective(U[None] if single else U)
    return float(vals[0]) if single else vals


def drift_gap(model, spec: ProblemSpec, scen: ScenarioSet, x_hat, controls):
    """Public drift-gap evaluation; negative means the constraint holds."""
    U = np.asarray(controls, dtype=float)
    single = U.ndim == 2
    roll = _Rollout(model, spec, scen, x_hat)
    vals = roll.drift_gap(U[None] if single else U)
    return float(vals[0]) if single else vals


def _fd_gradient(fn, U, eps: float, u_max: float) -> np.ndarray:
    """Central finite differences with probes projected onto the control ball."""
    T, n_u = U.shape
    m = T * n_u
    flat = U.reshape(m)
    probes = np.concatenate([flat + eps * np.eye(m), flat - eps * np.eye(m)])
    vals = fn(project_controls(probes.reshape(2 * m, T, n_u), u_max))
    return ((vals[:m] - vals[m:]) / (2.0 * eps)).reshape(T, n_u)


def _projected_descent(fn, U, u_max: float, cfg: SolverConfig):
    """Armijo projected gradient; evaluates the whole step ladder in one batch."""
    U = project_controls(U, u_max)
    f = float(fn(U[None])[0])
    step = cfg.step_init
    converged = False
    ladder = cfg.backtrack ** np.arange(cfg.n_backtracks)
    for _ in range(cfg.max_inner):
        g = _fd_gradient(fn, U, cfg.fd_eps, u_max)
        if not np.all(np.isfinite(g)):
            break
        candidates = project_controls(U - (step * ladder)[:, None, None] * g, u_max)
        f_cand = fn(candidates)
        moved = np.einsum("pti,ti->p", U - candidates, g)
        ok = (f_cand <= f - cfg.armijo * moved) & (moved > 0.0)
        if not np.any(ok):
            converged = True
            break
        j = int(np.argmax(ok))
        new_f = float(f_cand[j])
        U = candidates[j]
        if abs(f - new_f) <= cfg.ftol * (1.0 + abs(f)):
            f = new_f
            converged = True
            break
        f = new_f
        step = min(step * ladder[j] / cfg.backtrack, cfg.step_init * 1e3)
    return U, f, converged


def _restore_feasibility(roll: _Rollout, U, U_safe, tol: float):
    """Blend toward a known-feasible sequence until the drift gap closes."""
    thetas = np.linspace(0.0, 1.0, 17)[1:]
    blends = (1.0 - thetas)[:, None, None] * U + thetas[:, None, None] * U_safe
    gaps = roll.drift_gap(blends)
    ok = np.flatnonzero(gaps <= 0.5 * tol)
    if ok.size == 0:
        return None
    return blends[ok[0]]


def _fallback_rollout(model, spec: ProblemSpec, fallback: FallbackPolicy, x_hat):
    """Noise-free trajectory of the stabilizing feedback from the belief mean."""
    x = np.asarray(x_hat, dtype=float)
    zero = np.zeros(model.dyn_noise.dim)
    controls = []
    for _ in range(spec.horizon):
        u = alpha(fallback, x - spec.target.center)
        controls.append(u)
        x = model.dynamics(x, u, zero)
    return np.asarray(controls)


def solve_control(
    model: SystemModel,
    spec: ProblemSpec,
    scen: ScenarioSet,
    x_hat,
    stream: RandomStream,
    cfg: SolverConfig = SolverConfig(),
    fallback: FallbackPolicy | None = None,
    warm_start: np.ndarray | None = None,
) -> SolverResult:
    """Multi-start solve of one receding-horizon problem.

    Starts include the shifted previous solution when provided, the fallback
    rollout, the zero sequence, and random admissible sequences; a warm start
    stands in for the zero and random ones, and with cfg.early_exit the first
    start that converges to a feasible point wins outright.  For the
    drift-constrained policy each start runs an augmented-Lagrangian loop and
    the result is declared feasible only if its recomputed drift gap is within
    the configured slack; otherwise the best effort is reported as
    "infeasible-drift" and callers should apply the fallback feedback.
    """
    x_hat = np.asarray(x_hat, dtype=float)
    roll = _Rollout(model, spec, scen, x_hat)
    drift_active = spec.policy == "fisher-lyapunov" and not spec.target.contains(x_hat)
    T, n_u = spec.horizon, model.n_u

    starts = []
    safe = None
    if warm_start is not None:
        W = np.asarray(warm_start, dtype=float)
        if W.shape != (T, n_u):
            raise DimensionMismatch(f"warm start must have shape ({T}, {n_u})")
        starts.append(project_controls(W, spec.u_max))
    if fallback is not None:
        safe = _fallback_rollout(model, spec, fallback, x_hat)
        starts.append(safe)
    if warm_start is None:
        starts.append(np.zeros((T, n_u)))
        gen = stream.generator()
        for _ in range(cfg.n_random_starts):
            raw = gen.standard_normal((T, n_u))
            radius = spec.u_max * gen.random((T, 1)) ** (1.0 / n_u)
            norms = np.linalg.norm(raw, axis=-1, keepdims=True)
            starts.append(raw / np.where(norms > 0, norms, 1.0) * radius)

    tol = spec.drift.tol
    best = None
    for U0 in starts:
        if drift_active:
            mu, rho = 0.0, cfg.rho_init
            U, gap_prev, converged = U0, None, False
            for _ in range(cfg.max_outer):
                U, _, converged = _projected_descent(
                    lambda V: roll.merit(V, mu, rho), U, spec.u_max, cfg
                )
                gap = float(roll.drift_gap(U[None])[0])
                if gap <= tol and converged:
                    break
                mu = max(0.0, mu + rho * gap)
                if gap_prev is not None and gap > 0.25 * abs(gap_prev):
                    rho *= cfg.rho_growth
                gap_prev = gap
            gap = float(roll.drift_gap(U[None])[0])
            if gap > tol and safe is not None:
                safe_gap = float(roll.drift_gap(safe[None])[0])
                if safe_gap <= 0.5 * tol:
                    restored = _restore_feasibility(roll, U, safe, tol)
                    if restored is not None:
                        U = restored
                        gap = float(roll.drift_gap(U[None])[0])
            feasible = gap <= tol
        else:
            U, _, converged = _projected_descent(
                roll.objective, U0, spec.u_max, cfg
            )
            gap, feasible = float("nan"), True
        f_base = float(roll.objective(U[None])[0])
        entry = (feasible, f_base, U, gap, converged)
        if best is None:
            best = entry
        else:
            # feasible beats infeasible; then lower cost; tie-break on slack
            b_feas, b_f = best[0], best[1]
            if (entry[0], -entry[1]) > (b_feas, -b_f):
                best = entry
            elif not entry[0] and not b_feas and entry[3] < best[3]:
                best = entry
        if cfg.early_exit and feasible and converged:
            break
    feasible, f_base, U, gap, converged = best
    if drift_active and not feasible:
        status = "infeasible-drift"
    elif converged:
        status = "optimal-local"
    else:
        status = "feasible-maxiter"
    return SolverResult(
        controls=U,
        objective=f_base,
        status=status,
        drift_slack=gap,
        info_value=roll.terminal_info(U),
        n_evals=roll.n_evals,
    )


@dataclass(frozen=True)
class StepDecision:
    """Applied control for one closed-loop step plus the solver outcome."""

    control: np.ndarray
    result: SolverResult | None
    used_fallback: bool
    in_target: bool

    @property
    def status(self) -> str:
        if self.in_target:
            return "in-target-fallback"
        if self.used_fallback:
            return "infeasible-fallback"
        return self.result.status


def control_step(
    model: SystemModel,
    spec: ProblemSpec,
    belief: ParticleBelief,
    stream: RandomStream,
    cfg: SolverConfig = SolverConfig(),
    fallback: FallbackPolicy | None = None,
    warm_start: np.ndarray | None = None,
) -> StepDecision:
    """Plan one control from the belief; fall back to the stabilizer if needed."""
    x_hat = weighted_mean(belief)
    if spec.policy == "fisher-lyapunov":
        if fallback is None:
            raise ConfigurationError("the drift-constrained policy needs a fallback")
        if spec.target.contains(x_hat):
            u = alpha(fallback, x_hat - spec.target.center)
            return StepDecision(u, None, used_fallback=True, in_target=True)
    scen = extract_scenarios(
        belief,
        model,
        spec.horizon,
        spec.n_scenarios,
        stream.child(0),
        n_drift_draws=spec.drift.n_draws,
        ridge=spec.scenario_ridge,
        with_information=spec.needs_information(),
    )
    if spec.policy == "fisher-lyapunov":
        # When even the stabilizing feedback fails the sampled drift test the
        # constrained problem has no certificate to offer; skip the solve.
        safe = _fallback_rollout(model, spec, fallback, x_hat)
        if drift_gap(model, spec, scen, x_hat, safe) > spec.drift.tol:
            u = alpha(fallback, x_hat - spec.target.center)
            return StepDecision(u, None, used_fallback=True, in_target=False)
    result = solve_control(
        model, spec, scen, x_hat, stream.child(1), cfg, fallback, warm_start
    )
    if result.status == "infeasible-drift":
        warnings.warn(
            "drift-feasible control not found; applying the fallback feedback",
            RuntimeWarning,
        )
        u = alpha(fallback, x_hat - spec.target.center)
        return StepDecision(u, result, used_fallback=True, in_target=False)
    return StepDecision(result.controls[0], result, used_fallback=False, in_target=False)


_INIT, _TRUTH, _OBS, _FILT, _PLAN = 0, 1, 2, 3, 4


@dataclass(frozen=True)
class RunRecord:
    """Closed-loop trajectory log plus terminal summary fields."""

    policy: str
    seed: int
    config_digest: str
    stop_reason: str
    step: np.ndarray
    x_true: np.ndarray
    x_hat: np.ndarray
    control: np.ndarray
    ess: np.ndarray
    drift_slack: np.ndarray
    info_value: np.ndarray
    status: tuple
    terminal_true: np.ndarray
    terminal_estimate: np.ndarray
    target_center: np.ndarray

    @property
    def steps(self) -> int:
        return len(self.step)

    @property
    def reached(self) -> bool:
        return self.stop_reason == "reached-target"

    def terminal_position_error(self) -> float:
        n = self.terminal_true.size // 2
        return float(np.linalg.norm((self.terminal_true - self.target_center)[:n]))

    def terminal_horizontal_error(self) -> float:
        return float(np.linalg.norm((self.terminal_true - self.target_center)[:2]))

    def estimate_error(self) -> float:
        return float(np.linalg.norm(self.terminal_true - self.terminal_estimate))

    def summary(self) -> dict:
        return {
            "policy": self.policy,
            "seed": self.seed,
            "config_digest": self.config_digest,
            "stop_reason": self.stop_reason,
            "steps": self.steps,
            "reached": self.reached,
            "terminal_position_error": self.terminal_position_error(),
            "terminal_horizontal_error": self.terminal_horizontal_error(),
            "terminal_estimate_error": self.estimate_error(),
        }

    def save(self, out_dir, tag: str = "run") -> None:
        out_dir = str(out_dir)
        n_x = self.terminal_true.size
        n_u = self.control.shape[1] if self.steps else 0
        with open(f"{out_dir}/{tag}_trajectory.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(
                ["step"]
                + [f"x_{i + 1}" for i in range(n_x)]
                + [f"est_{i + 1}" for i in range(n_x)]
                + [f"u_{i + 1}" for i in range(n_u)]
                + ["ess", "drift_slack", "info_value", "status"]
            )
            for k in range(self.steps):
                writer.writerow(
                    [int(self.step[k])]
                    + [repr(float(v)) for v in self.x_true[k]]
                    + [repr(float(v)) for v in self.x_hat[k]]
                    + [repr(float(v)) for v in self.control[k]]
                    + [
                        repr(float(self.ess[k])),
                        repr(float(self.drift_slack[k])),
                        repr(float(self.info_value[k])),
                        self.status[k],
                    ]
                )
        with open(f"{out_dir}/{tag}_summary.json", "w") as fh:
            json.dump(self.summary(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def config_digest(spec: ProblemSpec, cfg: SolverConfig, n_particles: int) -> str:
    """Short stable hash of the run configuration for summary files."""
    payload = {
        "spec": asdict(spec),
        "solver": asdict(cfg),
        "n_particles": n_particles,
    }
    text = json.dumps(
        payload, sort_keys=True, default=lambda o: np.asarray(o).tolist()
    )
    return hashlib.sha256(text.encode()).hexdigest()[:12]


def run_closed_loop(
    model: SystemModel,
    spec: ProblemSpec,
    prior,
    stream: RandomStream,
    cfg: SolverConfig = SolverConfig(),
    fallback: FallbackPolicy | None = None,
    n_particles: int = 1000,
    max_steps: int = 150,
    resample: ResampleConfig = ResampleConfig(),
    x0=None,
    belief_hook=None,
) -> RunRecord:
    """Simulate one run: filter, plan, apply, until the estimate reaches the target.

    Truth, observation, and filter randomness are drawn from purpose-keyed
    child streams indexed by step, so two runs with the same seed see
    identical disturbances regardless of the policy being planned.
    """
    if x0 is None:
        x_true = np.asarray(prior.sample(stream.child(_TRUTH, 0).generator()), dtype=float)
    else:
        x_true = np.asarray(x0, dtype=float)
    belief = init_belief(prior, n_particles, stream.child(_INIT))
    digest = config_digest(spec, cfg, n_particles)

    rows = {k: [] for k in ("step", "x_true", "x_hat", "control", "ess", "slack", "info")}
    statuses = []
    warm = None
    stop_reason = "max-steps"
    try:
        belief = weight_update(
            belief, model.sample_observation(x_true, stream.child(_OBS, 0)), model
        )
        if effective_sample_size(belief.weights) < resample.threshold * belief.n:
            belief = systematic_resample(belief, stream.child(_FILT, 0))
    except DegenerateBelief:
        stop_reason = "degenerate-belief"
        max_steps = 0
    for k in range(max_steps):
        x_hat = weighted_mean(belief)
        if spec.target.contains(x_hat):
            stop_reason = "reached-target"
            break
        decision = control_step(
            model, spec, belief, stream.child(_PLAN, k), cfg, fallback, warm
        )
        u = decision.control
        res = decision.result
        rows["step"].append(k)
        rows["x_true"].append(x_true.copy())
        rows["x_hat"].append(x_hat)
        rows["control"].append(u)
        rows["ess"].append(effective_sample_size(belief.weights))
        rows["slack"].append(res.drift_slack if res is not None else float("nan"))
        rows["info"].append(res.info_value if res is not None else float("nan"))
        statuses.append(decision.status)
        x_true = model.sample_dynamics(x_true, u, stream.child(_TRUTH, k + 1))
        y = model.sample_observation(x_true, stream.child(_OBS, k + 1))
        try:
            belief = filter_step(belief, u, y, model, resample, stream.child(_FILT, k + 1))
        except DegenerateBelief:
            stop_reason = "degenerate-belief"
            break
        if res is not None and res.status in SOLVED_STATUSES:
            warm = np.vstack([res.controls[1:], res.controls[-1:]])
        else:
            warm = None
        if belief_hook is not None:
            belief_hook(k, belief)

    n_u = model.n_u
    return RunRecord(
        policy=spec.policy,
        seed=stream.seed,
        config_digest=digest,
        stop_reason=stop_reason,
        step=np.asarray(rows["step"], dtype=int),
        x_true=np.asarray(rows["x_true"]).reshape(len(rows["step"]), model.n_x),
        x_hat=np.asarray(rows["x_hat"]).reshape(len(rows["step"]), model.n_x),
        control=np.asarray(rows["control"]).reshape(len(rows["step"]), n_u),
        ess=np.asarray(rows["ess"], dtype=float),
        drift_slack=np.asarray(rows["slack"], dtype=float),
        info_value=np.asarray(rows["info"], dtype=float),
        status=tuple(statuses),
        terminal_true=x_true,
        terminal_estimate=weighted_mean(belief),
        target_center=spec.target.center,
    )
