"""Closed-form references the test suite checks the package against.

These implementations are intentionally independent of the package internals:
plain textbook Kalman recursions plus small helpers, kept simple enough to
audit by eye.
"""
import numpy as np


def kalman_covariances(A, H, Q, R, P0, steps):
    """Posterior covariance sequence P_{k|k}, k = 1..steps (pure Riccati form)."""
    P = np.asarray(P0, dtype=float)
    out = []
    for _ in range(steps):
        Pp = A @ P @ A.T + Q
        S = H @ Pp @ H.T + R
        K = Pp @ H.T @ np.linalg.inv(S)
        P = Pp - K @ H @ Pp
        P = 0.5 * (P + P.T)
        out.append(P.copy())
    return out


def kalman_filter(A, B, H, Q, R, m0, P0, controls, observations):
    """Full Kalman filter conditioned like the particle filter harness.

    The first observation updates the prior directly; afterwards each step
    predicts with control u_k and updates with observation y_{k+1}.  Returns
    the posterior means after every observation (len(observations) rows).
    """
    m = np.asarray(m0, dtype=float)
    P = np.asarray(P0, dtype=float)
    I = np.eye(m.size)

    def update(m, P, y):
        S = H @ P @ H.T + R
        K = P @ H.T @ np.linalg.inv(S)
        m = m + K @ (y - H @ m)
        IKH = I - K @ H
        P = IKH @ P @ IKH.T + K @ R @ K.T
        return m, 0.5 * (P + P.T)

    m, P = update(m, P, observations[0])
    means = [m.copy()]
    for u, y in zip(controls, observations[1:]):
        m = A @ m + B @ u
        P = A @ P @ A.T + Q
        m, P = update(m, P, y)
        means.append(m.copy())
    return np.array(means)


def random_stable_system(seed, n, m, spectral_radius=0.9):
    """Random LTI system with the given spectral radius and PD noise."""
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((n, n))
    A *= spectral_radius / max(abs(np.linalg.eigvals(A)))
    H = rng.standard_normal((m, n))
    Mq = rng.standard_normal((n, n))
    Q = Mq @ Mq.T / n + 0.1 * np.eye(n)
    Mr = rng.standard_normal((m, m))
    R = Mr @ Mr.T / m + 0.1 * np.eye(m)
    Mp = rng.standard_normal((n, n))
    P0 = Mp @ Mp.T / n + 0.5 * np.eye(n)
    return A, H, Q, R, P0
