"""Finite-difference simulation of the stochastic heat equation and noisy observations.

The drift ``div(theta grad X)`` is discretized in flux form with Dirichlet
boundaries and stepped by backward Euler; the space-time white noise enters
explicitly with cell-averaged density ``sigma * sqrt(dt / dx) * xi``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, Optional

import numba
import numpy as np

from .grid import NOISE_BLOCK, DiffusivityField, ScalarField1D, SeedSpec, SpaceTimeGrid

__all__ = [
    "TridiagonalOperator",
    "Trajectory",
    "Observation",
    "discretize_diffusion",
    "simulate",
    "iter_trajectory",
    "add_static_noise",
    "static_noise_eta",
    "DEFAULT_MEMORY_BUDGET",
]

DEFAULT_MEMORY_BUDGET = 200_000_000  # entries held in memory before streaming is required


@dataclass(frozen=True)
class TridiagonalOperator:
    """Symmetric tridiagonal matrix stored as its three diagonals."""

    lower: np.ndarray  # A[j, j-1], length n-1
    diag: np.ndarray
    upper: np.ndarray  # A[j, j+1], length n-1

    @property
    def n(self) -> int:
        return self.diag.size

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Matrix-vector product along the last axis."""
        X = np.asarray(X, dtype=np.float64)
        out = self.diag * X
        out[..., :-1] += self.upper * X[..., 1:]
        out[..., 1:] += self.lower * X[..., :-1]
        return out

    def to_dense(self) -> np.ndarray:
        return np.diag(self.diag) + np.diag(self.upper, 1) + np.diag(self.lower, -1)


def discretize_diffusion(theta: DiffusivityField, grid: SpaceTimeGrid) -> TridiagonalOperator:
    """Flux-form discretization of ``div(theta grad .)`` on the interior nodes.

    ``(A X)_j = [th_{j+1/2} (X_{j+1} - X_j) - th_{j-1/2} (X_j - X_{j-1})] / dx^2``
    with ``th_{j+1/2} = theta((x_j + x_{j+1}) / 2)`` and zero ghost values.
    """
    if grid.nx < 3:
        raise ValueError(f"grid too coarse: nx={grid.nx} < 3")
    if not theta.theta_min > 0:
        raise ValueError("theta_min must be positive")
    dx = grid.dx
    mid = (np.arange(grid.nx) + 0.5) * dx  # x_{1/2}, ..., x_{nx-1/2}
    th = theta(mid)
    if np.any(th <= 0) or not np.all(np.isfinite(th)):
        raise ValueError("diffusivity must be positive and finite at the cell faces")
    inv = 1.0 / dx**2
    off = th[1:-1] * inv
    diag = -(th[:-1] + th[1:]) * inv
    return TridiagonalOperator(lower=off.copy(), diag=diag, upper=off.copy())


@dataclass(frozen=True)
class _ImplicitSolver:
    """Thomas factorization of ``I - dt A``, computed once per simulation."""

    lower: np.ndarray
    inv_den: np.ndarray
    cprime: np.ndarray

    @classmethod
    def build(cls, A: TridiagonalOperator, dt: float) -> "_ImplicitSolver":
        n = A.n
        d = 1.0 - dt * A.diag
        lo = np.zeros(n)
        up = np.zeros(n)
        lo[1:] = -dt * A.lower
        up[:-1] = -dt * A.upper
        # strict diagonal dominance with margin 1 guarantees nonzero pivots
        if np.any(np.abs(d) - np.abs(lo) - np.abs(up) < 1.0 - 1e-9):
            raise ArithmeticError("I - dt*A is not diagonally dominant; zero pivot possible")
        inv_den = np.empty(n)
        cprime = np.zeros(n)
        den = d[0]
        inv_den[0] = 1.0 / den
        cprime[0] = up[0] / den
        for j in range(1, n):
            den = d[j] - lo[j] * cprime[j - 1]
            if den == 0.0:
                raise ArithmeticError(f"zero pivot at row {j}")
            inv_den[j] = 1.0 / den
            cprime[j] = up[j] / den
        return cls(lo, inv_den, cprime)


@numba.njit(cache=True, nogil=True)
def _march(x, noise, fac, lower, inv_den, cprime, out, advance_last):
    """out[0] = x, then out[s+1] = solve(out[s] + fac * noise[s]).

    When ``advance_last`` is set, ``x`` is finally advanced with the last noise
    row so that it holds the first state of the next block.
    """
    n = x.shape[0]
    m = out.shape[0]
    y = np.empty(n)
    for j in range(n):
        out[0, j] = x[j]
    steps = m - 1 + (1 if advance_last else 0)
    for s in range(steps):
        y[0] = (x[0] + fac * noise[s, 0]) * inv_den[0]
        for j in range(1, n):
            y[j] = (x[j] + fac * noise[s, j] - lower[j] * y[j - 1]) * inv_den[j]
        x[n - 1] = y[n - 1]
        for j in range(n - 2, -1, -1):
            x[j] = y[j] - cprime[j] * x[j + 1]
        if s + 1 < m:
            for j in range(n):
                out[s + 1, j] = x[j]


@dataclass(frozen=True)
class Trajectory:
    """Simulated signal ``X(t_i, x_j)``; row 0 is the initial condition."""

    grid: SpaceTimeGrid
    snapshots: np.ndarray
    initial: ScalarField1D
    sigma: float
    theta: DiffusivityField
    seed: SeedSpec


@dataclass(frozen=True)
class Observation:
    """Noisy field ``Y = X + eta * zeta`` on the grid of a trajectory.

    ``epsilon`` is the continuous-model noise level and
    ``eta = epsilon / sqrt(dt * dx)`` the per-sample standard deviation.
    """

    grid: SpaceTimeGrid
    values: np.ndarray
    epsilon: float
    eta: float
    seed: Optional[SeedSpec] = None
    trajectory: Optional[Trajectory] = None


def static_noise_eta(epsilon: float, grid: SpaceTimeGrid) -> float:
    return epsilon / math.sqrt(grid.dt * grid.dx)


def _initial_values(x0_init, grid):
    if x0_init is None:
        return ScalarField1D(grid, np.zeros(grid.n_interior))
    if isinstance(x0_init, ScalarField1D):
        return x0_init
    return ScalarField1D(grid, np.asarray(x0_init, dtype=np.float64))


def iter_trajectory(
    theta: DiffusivityField,
    sigma: float,
    grid: SpaceTimeGrid,
    x0_init=None,
    seed: SeedSpec = SeedSpec(0),
    noise_multiplier: float = 1.0,
) -> Iterator[tuple[int, np.ndarray]]:
    """Stream the trajectory as ``(row0, rows)`` blocks of ``NOISE_BLOCK`` rows.

    Produces exactly the same numbers as :func:`simulate`. The yielded array is
    reused, so consumers must finish with it before advancing the iterator.
    ``noise_multiplier`` rescales the dynamic noise and exists only to check
    that validation against the covariance oracle notices a wrong convention.
    """
    if not sigma >= 0:
        raise ValueError("sigma must be non-negative")
    A = discretize_diffusion(theta, grid)
    solver = _ImplicitSolver.build(A, grid.dt)
    x = np.array(_initial_values(x0_init, grid).values, dtype=np.float64)
    fac = float(sigma) * math.sqrt(grid.dt / grid.dx) * noise_multiplier
    n = grid.n_interior
    out = np.empty((NOISE_BLOCK, n))
    zeros = np.zeros((NOISE_BLOCK, n))
    noise_rows = grid.nt - 1
    blocks = seed.normal_blocks("dynamic", noise_rows, n) if fac != 0.0 else None
    for row0 in range(0, grid.nt, NOISE_BLOCK):
        m = min(NOISE_BLOCK, grid.nt - row0)
        more = row0 + m < grid.nt
        if blocks is not None and (m > 1 or more):
            _, noise = next(blocks)
        else:
            noise = zeros
        _march(x, noise, fac, solver.lower, solver.inv_den, solver.cprime, out[:m], more)
        yield row0, out[:m]


def simulate(
    theta: DiffusivityField,
    sigma: float,
    grid: SpaceTimeGrid,
    x0_init=None,
    seed: SeedSpec = SeedSpec(0),
    memory_budget: int = DEFAULT_MEMORY_BUDGET,
    noise_multiplier: float = 1.0,
) -> Trajectory:
    """Implicit Euler-Maruyama trajectory held in memory.

    Each step solves ``(I - dt A) X^{n+1} = X^n + sigma sqrt(dt/dx) xi^n`` with
    the Thomas algorithm. Use :func:`iter_trajectory` when ``nt * (nx-1)``
    exceeds ``memory_budget``.
    """
    n_entries = grid.nt * grid.n_interior
    if n_entries > memory_budget:
        raise MemoryError(
            f"trajectory has {n_entries} entries (> budget {memory_budget}); stream it with iter_trajectory"
        )
    init = _initial_values(x0_init, grid)
    snaps = np.empty(grid.shape)
    for row0, rows in iter_trajectory(theta, sigma, grid, init, seed, noise_multiplier):
        snaps[row0 : row0 + rows.shape[0]] = rows
    if not np.all(np.isfinite(snaps)):
        raise FloatingPointError("non-finite values in trajectory")
    return Trajectory(grid, snaps, init, float(sigma), theta, seed)


def add_static_noise(traj: Trajectory, epsilon: float, seed: SeedSpec) -> Observation:
    """``Y_ij = X(t_i, x_j) + eta * zeta_ij`` with ``eta = epsilon / sqrt(dt dx)``.

    The standard normal field ``zeta`` depends only on ``seed``, not on
    ``epsilon``: observations of one trajectory at several noise levels share
    it.
    """
    if not (epsilon >= 0 and math.isfinite(epsilon)):
        raise ValueError("epsilon must be a finite non-negative number")
    grid = traj.grid
    eta = static_noise_eta(epsilon, grid)
    X = traj.snapshots
    if not np.all(np.isfinite(X)):
        raise ValueError("trajectory contains non-finite values")
    if epsilon == 0:
        Y = X.copy()
    else:
        Y = np.empty_like(X)
        for row0, z in seed.normal_blocks("static", grid.nt, grid.n_interior):
            m = z.shape[0]
            np.multiply(z, eta, out=Y[row0 : row0 + m])
            Y[row0 : row0 + m] += X[row0 : row0 + m]
    return Observation(grid, Y, float(epsilon), eta, seed, traj)
