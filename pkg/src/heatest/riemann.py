"""Riemann sums of a field against many localized kernels at once.

A separable localized kernel factors into a time weight per window ``k`` and a
spatial profile per shift ``x``. Summing a field against all of them therefore
takes two passes: rows are folded into per-window partial sums while the field
streams by (``WindowSums``), and the spatial profiles are applied at the end
with one matrix product per shift grid (``WindowSums.project``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np

from .grid import SpaceTimeGrid
from .kernels import Kernel, check_resolution, MIN_CELLS_PER_HALFWIDTH, MIN_STEPS_PER_WINDOW

__all__ = ["n_windows", "RowProjector", "WindowSums", "spatial_profiles", "DERIVATIVE_MODES"]

DERIVATIVE_MODES = ("grid", "analytic")


def n_windows(T: float, eps: float) -> int:
    """``N_eps = floor(T / eps) - 1``; the tolerance absorbs ratios like 1/0.05**2."""
    return int(math.floor(T / eps * (1 + 1e-12))) - 1


@numba.njit(cache=True, nogil=True)
def _fold_rows(rows, row0, indptr, targets, weights, acc):
    m, n = rows.shape
    for r in range(m):
        i = row0 + r
        for p in range(indptr[i], indptr[i + 1]):
            k = targets[p]
            w = weights[p]
            for j in range(n):
                acc[k, j] += w * rows[r, j]


class RowProjector:
    """Accumulates ``acc[q] += sum_i W[i, q] * row_i`` for a sparse row-weight matrix ``W``.

    ``W`` is given in CSR form over the ``nt`` time rows: row ``i`` contributes
    to targets ``targets[indptr[i]:indptr[i+1]]`` with matching ``weights``.
    """

    def __init__(self, nt: int, n_cols: int, indptr, targets, weights, n_targets: int):
        self.indptr = np.ascontiguousarray(indptr, dtype=np.int64)
        self.targets = np.ascontiguousarray(targets, dtype=np.int64)
        self.weights = np.ascontiguousarray(weights, dtype=np.float64)
        if self.indptr.size != nt + 1:
            raise ValueError("indptr must have nt + 1 entries")
        self.nt = nt
        self.acc = np.zeros((n_targets, n_cols))
        self.rows_seen = 0

    @classmethod
    def dense(cls, time_weights: np.ndarray, n_cols: int) -> "RowProjector":
        """Projector for a dense ``(nt, q)`` weight matrix."""
        tw = np.asarray(time_weights, dtype=np.float64)
        nt, q = tw.shape
        indptr = np.arange(nt + 1) * q
        targets = np.tile(np.arange(q), nt)
        return cls(nt, n_cols, indptr, targets, tw.ravel(), q)

    def add(self, row0: int, rows: np.ndarray) -> None:
        rows = np.ascontiguousarray(rows, dtype=np.float64)
        if row0 + rows.shape[0] > self.nt:
            raise ValueError("rows beyond the end of the grid")
        _fold_rows(rows, int(row0), self.indptr, self.targets, self.weights, self.acc)
        self.rows_seen += rows.shape[0]


def _window_weights(grid: SpaceTimeGrid, kernel: Kernel, eps: float, derivatives: str):
    """CSR weights: value targets ``k`` and time-derivative targets ``N + 1 + k``."""
    N = n_windows(grid.T, eps)
    if N < 1:
        raise ValueError(f"observation horizon T={grid.T} holds fewer than two windows of length {eps}")
    t = grid.t
    dt = grid.dt
    first = np.floor(t / eps).astype(np.int64)
    entries = []
    # a row feeds window floor(t/eps); in grid mode the forward difference also
    # reaches the next window when t + dt crosses its left edge
    for lag in (0, 1):
        k = first + lag
        ok = (k >= 0) & (k <= N)
        rows = np.nonzero(ok)[0]
        kk = k[ok]
        s = t[rows] / eps - kk
        val = kernel.time(s, 0)
        if derivatives == "analytic":
            der = kernel.time(s, 1) / eps
        else:
            der = (kernel.time(s + dt / eps, 0) - val) / dt
        entries.append((rows, kk, val, der))
    rows = np.concatenate([e[0] for e in entries] * 2)
    targ = np.concatenate([e[1] for e in entries] + [e[1] + N + 1 for e in entries])
    wts = np.concatenate([e[2] for e in entries] + [e[3] for e in entries])
    keep = wts != 0.0
    rows, targ, wts = rows[keep], targ[keep], wts[keep]
    order = np.lexsort((targ, rows))
    rows, targ, wts = rows[order], targ[order], wts[order]
    indptr = np.zeros(grid.nt + 1, dtype=np.int64)
    np.add.at(indptr, rows + 1, 1)
    np.cumsum(indptr, out=indptr)
    return N, indptr, targ, wts


class WindowSums:
    """Time-folded sums of a field for every window ``k = 0 .. N_eps`` of scale ``eps``.

    After all rows were added, ``value[k, j] = sum_i a(t_i/eps - k) Y_ij`` and
    ``deriv[k, j]`` holds the same with the time derivative of the localized
    time factor (analytic or forward difference, see ``derivatives``).
    """

    def __init__(
        self,
        grid: SpaceTimeGrid,
        kernel: Kernel,
        eps: float,
        derivatives: str = "grid",
        min_cells: float = MIN_CELLS_PER_HALFWIDTH,
        min_steps: float = MIN_STEPS_PER_WINDOW,
    ):
        if derivatives not in DERIVATIVE_MODES:
            raise ValueError(f"unknown derivative mode {derivatives!r}")
        check_resolution(grid, eps, min_cells, min_steps)
        self.grid = grid
        self.kernel = kernel
        self.eps = float(eps)
        self.derivatives = derivatives
        self.N, indptr, targ, wts = _window_weights(grid, kernel, eps, derivatives)
        self._proj = RowProjector(grid.nt, grid.n_interior, indptr, targ, wts, 2 * (self.N + 1))

    @classmethod
    def from_field(cls, values: np.ndarray, grid: SpaceTimeGrid, kernel: Kernel, eps: float, **kw) -> "WindowSums":
        ws = cls(grid, kernel, eps, **kw)
        ws.add(0, values)
        return ws

    def add(self, row0: int, rows: np.ndarray) -> None:
        self._proj.add(row0, rows)

    @property
    def complete(self) -> bool:
        return self._proj.rows_seen == self.grid.nt

    @property
    def value(self) -> np.ndarray:
        return self._proj.acc[: self.N + 1]

    @property
    def deriv(self) -> np.ndarray:
        return self._proj.acc[self.N + 1 :]

    @property
    def scale(self) -> float:
        """Amplitude ``eps^{-3/4}`` times the cell volume ``dt * dx``."""
        return self.eps ** (-0.75) * self.grid.dt * self.grid.dx

    def project(self, profile: np.ndarray, which: str = "value") -> np.ndarray:
        """``scale * folded @ profile``; ``profile`` is ``(n_interior, n_shifts)``."""
        src = self.value if which == "value" else self.deriv
        return self.scale * (src @ profile)

    def statistics(self, profiles: dict) -> tuple[np.ndarray, np.ndarray]:
        """``(X', X^Delta)`` arrays of shape ``(N + 1, n_shifts)``."""
        xprime = -self.project(profiles["value"], "deriv")
        xdelta = self.project(profiles["lap"], "value")
        return xprime, xdelta

    def combined(self, other: "WindowSums", c: float) -> "WindowSums":
        """Sums of ``self + c * other`` (fields on the same grid and scale)."""
        if other.N != self.N or other.grid != self.grid or other.derivatives != self.derivatives:
            raise ValueError("window sums are not compatible")
        out = object.__new__(WindowSums)
        out.__dict__.update(self.__dict__)
        proj = object.__new__(RowProjector)
        proj.__dict__.update(self._proj.__dict__)
        proj.acc = self._proj.acc + c * other._proj.acc
        out._proj = proj
        return out


def spatial_profiles(
    grid: SpaceTimeGrid,
    kernel: Kernel,
    eps: float,
    x0: float,
    shifts,
    derivatives: str = "grid",
) -> dict:
    """Spatial factors of the localized kernels on the interior nodes.

    Returns ``value`` (``s``), ``lap`` (Laplacian of ``s``) and ``grad`` as
    ``(n_interior, n_shifts)`` arrays in physical units. In grid mode ``lap``
    is the three-point Laplacian of the sampled profile.
    """
    delta = math.sqrt(eps)
    x = grid.x[:, None]
    sh = np.asarray(shifts, dtype=np.float64)[None, :]
    xi = (x - x0) / delta - sh
    value = kernel.space(xi, 0)
    if derivatives == "analytic":
        lap = kernel.space(xi, 2) / delta**2
        grad = kernel.space(xi, 1) / delta
    elif derivatives == "grid":
        h = grid.dx
        up = kernel.space(xi + h / delta, 0)
        dn = kernel.space(xi - h / delta, 0)
        lap = (up - 2 * value + dn) / h**2
        grad = (up - dn) / (2 * h)
    else:
        raise ValueError(f"unknown derivative mode {derivatives!r}")
    return {"value": value, "lap": lap, "grad": grad}
