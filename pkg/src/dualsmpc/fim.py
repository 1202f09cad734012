"""Recursive propagation of estimation information and scalar costs on it.

For additive-Gaussian models the information matrix about the state evolves as

    J' = D22 - D21 (J + D11)^-1 D12

with D11 = F' Qinv F, D12 = -F' Qinv = D21', D22 = Qinv + H' Rinv H, where F
and H are the dynamics and observation Jacobians at the current point.  All
operations accept stacked matrices (leading batch axes) so scenario rollouts
can propagate many recursions at once.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .model import ConfigurationError

INFO_COST_FORMS = ("trace_inverse", "neg_log_det")


class SingularStepWarning(RuntimeWarning):
    """A matrix inverse inside the recursion needed a ridge to proceed."""


@dataclass(frozen=True)
class InfoCostConfig:
    """Scalarization of the information matrix inside the controller objective.

    form: "trace_inverse" penalizes total posterior variance, "neg_log_det"
    penalizes posterior volume.  w_stage weights per-stage terms, w_term the
    terminal one.  ridge keeps the scalarization finite for rank-deficient J.
    """

    form: str = "trace_inverse"
    w_stage: float = 0.0
    w_term: float = 1.0
    ridge: float = 1e-6

    def __post_init__(self):
        if self.form not in INFO_COST_FORMS:
            raise ConfigurationError(f"unknown info cost form: {self.form!r}")
        if self.w_stage < 0.0 or self.w_term < 0.0 or self.ridge < 0.0:
            raise ConfigurationError("info cost weights and ridge must be nonnegative")


def _sym(M: np.ndarray) -> np.ndarray:
    return 0.5 * (M + np.swapaxes(M, -1, -2))


def _inv(M: np.ndarray, ridge: float) -> np.ndarray:
    """Batched inverse with a ridge fallback for singular stacks."""
    try:
        return np.linalg.inv(M)
    except np.linalg.LinAlgError:
        warnings.warn(
            "singular matrix in information recursion; adding ridge",
            SingularStepWarning,
            stacklevel=3,
        )
        eye = np.eye(M.shape[-1])
        return np.linalg.inv(M + ridge * eye)


def fim_init(prior_cov) -> np.ndarray:
    """Initial information matrix: inverse of the prior covariance."""
    P0 = np.atleast_2d(np.asarray(prior_cov, dtype=float))
    if P0.shape[-1] != P0.shape[-2]:
        raise ConfigurationError("prior covariance must be square")
    if not np.allclose(P0, np.swapaxes(P0, -1, -2), atol=1e-10):
        raise ConfigurationError("prior covariance must be symmetric")
    try:
        J0 = np.linalg.inv(P0)
    except np.linalg.LinAlgError as exc:
        raise ConfigurationError("prior covariance must be invertible") from exc
    return _sym(J0)


def fim_step(J, F, H, Q_inv, R_inv, ridge: float = 1e-9) -> np.ndarray:
    """One information recursion step; broadcasts over leading axes.

    Args:
        J: current information, (..., n, n).
        F: dynamics Jacobian at the current point, (..., n, n).
        H: observation Jacobian at the next point, (..., m, n).
        Q_inv, R_inv: inverse noise covariances, (n, n) and (m, m).
        ridge: fallback regularization for singular intermediate inverses.
    """
    J = np.asarray(J, dtype=float)
    F = np.asarray(F, dtype=float)
    H = np.asarray(H, dtype=float)
    Ft = np.swapaxes(F, -1, -2)
    Ht = np.swapaxes(H, -1, -2)
    D11 = Ft @ Q_inv @ F
    D12 = -Ft @ Q_inv
    D21 = np.swapaxes(D12, -1, -2)
    D22 = Q_inv + Ht @ R_inv @ H
    mid = _inv(J + D11, ridge)
    return _sym(D22 - D21 @ mid @ D12)


def info_cost(J, cfg: InfoCostConfig) -> np.ndarray:
    """Scalar cost of an information matrix; broadcasts over leading axes."""
    J = np.asarray(J, dtype=float)
    Jr = J + cfg.ridge * np.eye(J.shape[-1])
    if cfg.form == "trace_inverse":
        out = np.trace(np.linalg.inv(Jr), axis1=-2, axis2=-1)
    else:
        sign, logdet = np.linalg.slogdet(Jr)
        if np.any(sign <= 0):
            raise ConfigurationError("neg_log_det requires positive definite J + ridge")
        out = -logdet
    return float(out) if out.ndim == 0 else out
