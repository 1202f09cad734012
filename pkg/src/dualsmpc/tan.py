"""Terrain-aided navigation benchmark: terrain maps and the vehicle model.

The vehicle is a damped double integrator in 3-D driven by bounded
acceleration commands.  It measures its ground clearance against a stored
terrain map plus its own speed, so horizontal position only becomes
observable where the terrain has relief.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .model import AdditiveGaussianModel, ConfigurationError, DimensionMismatch, RandomStream


class TerrainFileError(ValueError):
    """A terrain file is malformed; the message points at the offending line."""


@dataclass(frozen=True)
class TerrainGrid:
    """Regular height grid; heights[j, i] is the node at (x_i, y_j)."""

    heights: np.ndarray
    cell_size_m: float
    origin_x_m: float = 0.0
    origin_y_m: float = 0.0

    def __post_init__(self):
        h = np.asarray(self.heights, dtype=float)
        if h.ndim != 2 or h.shape[0] < 4 or h.shape[1] < 4:
            raise ConfigurationError("terrain grid must be at least 4x4 nodes")
        if not np.all(np.isfinite(h)):
            raise ConfigurationError("terrain heights must be finite")
        if not self.cell_size_m > 0.0:
            raise ConfigurationError("cell size must be positive")
        object.__setattr__(self, "heights", h)

    @property
    def nx(self) -> int:
        return self.heights.shape[1]

    @property
    def ny(self) -> int:
        return self.heights.shape[0]

    @property
    def extent(self) -> tuple:
        """(x_min, x_max, y_min, y_max) covered by the grid nodes."""
        return (
            self.origin_x_m,
            self.origin_x_m + (self.nx - 1) * self.cell_size_m,
            self.origin_y_m,
            self.origin_y_m + (self.ny - 1) * self.cell_size_m,
        )


def _catmull_rom(p, t):
    """Catmull-Rom cubic through 4 stacked samples p[0..3] at parameter t.

    Returns (value, derivative w.r.t. t).  Interpolates p[1] at t = 0 and
    p[2] at t = 1 and reproduces linear data exactly.
    """
    a = p[2] - p[0]
    b = 2.0 * p[0] - 5.0 * p[1] + 4.0 * p[2] - p[3]
    c = 3.0 * (p[1] - p[2]) + p[3] - p[0]
    value = p[1] + 0.5 * t * (a + t * (b + t * c))
    deriv = 0.5 * (a + t * (2.0 * b + 3.0 * t * c))
    return value, deriv


def _interpolate(grid: TerrainGrid, x, y):
    """Bicubic value and gradient at query points; clamps outside the grid."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    s = np.clip((x - grid.origin_x_m) / grid.cell_size_m, 0.0, grid.nx - 1.0)
    t = np.clip((y - grid.origin_y_m) / grid.cell_size_m, 0.0, grid.ny - 1.0)
    i0 = np.clip(np.floor(s).astype(int), 0, grid.nx - 2)
    j0 = np.clip(np.floor(t).astype(int), 0, grid.ny - 2)
    fs = s - i0
    ft = t - j0
    # 4x4 stencil with edge replication.
    cols = [np.clip(i0 + d, 0, grid.nx - 1) for d in (-1, 0, 1, 2)]
    rows = [np.clip(j0 + d, 0, grid.ny - 1) for d in (-1, 0, 1, 2)]
    vals, dxs = [], []
    for r in rows:
        p = [grid.heights[r, c] for c in cols]
        v, d = _catmull_rom(p, fs)
        vals.append(v)
        dxs.append(d)
    h, dh_dt = _catmull_rom(vals, ft)
    dh_ds, _ = _catmull_rom(dxs, ft)
    inv = 1.0 / grid.cell_size_m
    return h, dh_ds * inv, dh_dt * inv


def height_at(grid: TerrainGrid, x, y):
    """Interpolated terrain height; broadcasts over array queries."""
    return _interpolate(grid, x, y)[0]


def terrain_gradient(grid: TerrainGrid, x, y):
    """Analytic surface gradient (dh/dx, dh/dy) of the interpolant."""
    _, gx, gy = _interpolate(grid, x, y)
    return gx, gy


@dataclass(frozen=True)
class TerrainGenConfig:
    """Synthetic terrain: Gaussian bumps over a flat base, optional corridor.

    The corridor rectangle (x_lo, y_lo, x_hi, y_hi) is forced back to the
    base height after the bumps are laid down, which creates a featureless
    band through otherwise informative relief.
    """

    nx: int = 81
    ny: int = 61
    cell_size_m: float = 50.0
    origin_x_m: float = 0.0
    origin_y_m: float = 0.0
    base_height: float = 0.0
    n_bumps: int = 40
    amp_range: tuple = (20.0, 80.0)
    width_range: tuple = (80.0, 250.0)
    bump_region: tuple | None = None
    corridor: tuple | None = None
    seed: int = 0

    def __post_init__(self):
        if self.n_bumps < 0:
            raise ConfigurationError("bump count must be nonnegative")
        if not (self.amp_range[0] <= self.amp_range[1] and self.width_range[0] > 0):
            raise ConfigurationError("invalid bump amplitude or width range")


def generate_terrain(cfg: TerrainGenConfig) -> TerrainGrid:
    """Sample a bump field on the configured grid, then cut the corridor.

    Bump centers land uniformly on the whole grid, or inside the
    bump_region rectangle (x_lo, y_lo, x_hi, y_hi) when one is given.
    """
    gen = RandomStream(cfg.seed, (0,)).generator()
    xs = cfg.origin_x_m + cfg.cell_size_m * np.arange(cfg.nx)
    ys = cfg.origin_y_m + cfg.cell_size_m * np.arange(cfg.ny)
    X, Y = np.meshgrid(xs, ys)
    h = np.full((cfg.ny, cfg.nx), float(cfg.base_height))
    if cfg.bump_region is not None:
        cx_lo, cy_lo, cx_hi, cy_hi = cfg.bump_region
    else:
        cx_lo, cy_lo, cx_hi, cy_hi = xs[0], ys[0], xs[-1], ys[-1]
    for _ in range(cfg.n_bumps):
        cx = gen.uniform(cx_lo, cx_hi)
        cy = gen.uniform(cy_lo, cy_hi)
        amp = gen.uniform(*cfg.amp_range)
        width = gen.uniform(*cfg.width_range)
        h += amp * np.exp(-((X - cx) ** 2 + (Y - cy) ** 2) / (2.0 * width**2))
    if cfg.corridor is not None:
        x_lo, y_lo, x_hi, y_hi = cfg.corridor
        inside = (X >= x_lo) & (X <= x_hi) & (Y >= y_lo) & (Y <= y_hi)
        h[inside] = cfg.base_height
    return TerrainGrid(h, cfg.cell_size_m, cfg.origin_x_m, cfg.origin_y_m)


def save_terrain(grid: TerrainGrid, path) -> None:
    """Write a terrain file: one JSON header line, then ny CSV rows of nx."""
    header = {
        "nx": grid.nx,
        "ny": grid.ny,
        "cell_size_m": grid.cell_size_m,
        "origin_x_m": grid.origin_x_m,
        "origin_y_m": grid.origin_y_m,
    }
    with open(path, "w") as fh:
        fh.write(json.dumps(header) + "\n")
        for row in grid.heights:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def load_terrain(path) -> TerrainGrid:
    """Read a terrain file written by save_terrain; exact value round trip."""
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise TerrainFileError(f"{path}: line 1: empty terrain file")
    try:
        header = json.loads(lines[0])
        nx, ny = int(header["nx"]), int(header["ny"])
        cell = float(header["cell_size_m"])
        ox = float(header.get("origin_x_m", 0.0))
        oy = float(header.get("origin_y_m", 0.0))
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise TerrainFileError(f"{path}: line 1: bad header ({exc})") from exc
    if len(lines) < 1 + ny:
        raise TerrainFileError(
            f"{path}: line {len(lines) + 1}: expected {ny} data rows, found {len(lines) - 1}"
        )
    rows = []
    for j in range(ny):
        line_no = j + 2
        fields = lines[1 + j].split(",")
        if len(fields) != nx:
            raise TerrainFileError(
                f"{path}: line {line_no}: expected {nx} values, found {len(fields)}"
            )
        try:
            rows.append([float(v) for v in fields])
        except ValueError as exc:
            raise TerrainFileError(f"{path}: line {line_no}: {exc}") from exc
    try:
        return TerrainGrid(np.array(rows), cell, ox, oy)
    except ConfigurationError as exc:
        raise TerrainFileError(f"{path}: {exc}") from exc


class TanModel(AdditiveGaussianModel):
    """Damped double integrator over a terrain map.

    State (x, y, z, vx, vy, vz); control is 3-D acceleration with a Euclidean
    bound.  Observation: ground clearance mismatch z - h(x, y) plus the three
    speed components.
    """

    CONTROL_BOUND_RTOL = 1e-9

    def __init__(
        self,
        terrain: TerrainGrid,
        dt: float = 1.0,
        damping: float = 0.1,
        u_max: float = 2.0,
        Q=None,
        R=None,
    ):
        if not dt > 0.0 or not 0.0 <= damping * dt < 1.0:
            raise ConfigurationError("need dt > 0 and 0 <= damping * dt < 1")
        if not u_max > 0.0:
            raise ConfigurationError("control bound must be positive")
        Q = np.diag([0.01] * 3 + [0.04] * 3) if Q is None else Q
        R = np.diag([4.0, 0.01, 0.01, 0.01]) if R is None else R
        super().__init__(n_x=6, n_u=3, n_y=4, Q=Q, R=R)
        self.terrain = terrain
        self.dt = float(dt)
        self.damping = float(damping)
        self.u_max = float(u_max)
        a = 1.0 - damping * dt
        self.A = np.block(
            [
                [np.eye(3), dt * np.eye(3)],
                [np.zeros((3, 3)), a * np.eye(3)],
            ]
        )
        self.B = np.vstack([0.5 * dt**2 * np.eye(3), dt * np.eye(3)])
        self._H_fixed = np.zeros((4, 6))
        self._H_fixed[0, 2] = 1.0
        self._H_fixed[1:, 3:] = np.eye(3)

    def _check_control_bound(self, u):
        norms = np.linalg.norm(np.asarray(u, dtype=float), axis=-1)
        if np.any(norms > self.u_max * (1.0 + self.CONTROL_BOUND_RTOL)):
            raise DimensionMismatch(
                f"control norm {norms.max():.6g} exceeds bound {self.u_max:.6g}; "
                "policies must project before applying"
            )

    def dynamics_mean(self, x, u):
        self._check_control_bound(u)
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        return x @ self.A.T + u @ self.B.T

    def observation_mean(self, x):
        x = np.asarray(x, dtype=float)
        h = height_at(self.terrain, x[..., 0], x[..., 1])
        out = np.empty(x.shape[:-1] + (4,))
        out[..., 0] = x[..., 2] - h
        out[..., 1:] = x[..., 3:]
        return out

    def dynamics_jacobian(self, x, u):
        lead = np.asarray(x).shape[:-1]
        return np.broadcast_to(self.A, lead + self.A.shape)

    def observation_jacobian(self, x):
        x = np.asarray(x, dtype=float)
        gx, gy = terrain_gradient(self.terrain, x[..., 0], x[..., 1])
        H = np.broadcast_to(self._H_fixed, x.shape[:-1] + (4, 6)).copy()
        H[..., 0, 0] = -gx
        H[..., 0, 1] = -gy
        return H

    def supports_information(self) -> bool:
        return True


def rough_region_points(grid: TerrainGrid, base_height: float, threshold: float = 1.0):
    """Node coordinates where the terrain deviates from the base height."""
    mask = np.abs(grid.heights - base_height) > threshold
    j, i = np.nonzero(mask)
    return np.column_stack(
        [grid.origin_x_m + i * grid.cell_size_m, grid.origin_y_m + j * grid.cell_size_m]
    )


def min_distance_to_points(points: np.ndarray, queries: np.ndarray) -> float:
    """Smallest Euclidean distance from any query to the point set."""
    if len(points) == 0:
        return float("inf")
    from scipy.spatial import cKDTree

    d, _ = cKDTree(points).query(np.atleast_2d(queries))
    return float(np.min(d))
