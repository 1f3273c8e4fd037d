"""Space-time grids, sampled fields, diffusivity profiles and noise streams.

Everything in this module is immutable once built. State vectors hold the
interior nodes ``x_j = j * dx`` for ``j = 1 .. nx-1`` only; the Dirichlet
boundary values are implicit zeros.
"""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Optional

import numpy as np

__all__ = [
    "SpaceTimeGrid",
    "ScalarField1D",
    "DiffusivityField",
    "SeedSpec",
    "sample_field",
    "write_binary",
    "read_binary",
    "write_csv",
    "BinaryWriter",
    "open_binary",
    "NOISE_BLOCK",
]

# rows per independently keyed noise block; part of the reproducibility contract
NOISE_BLOCK = 1000

_PURPOSES = {"dynamic": 0, "static": 1}


@dataclass(frozen=True)
class SpaceTimeGrid:
    """Uniform grid on ``[0, T) x (0, 1)``.

    Time nodes are ``t_i = i * dt`` for ``i = 0 .. nt-1`` and interior spatial
    nodes are ``x_j = j * dx`` for ``j = 1 .. nx-1``.
    """

    T: float
    nt: int
    nx: int

    def __post_init__(self):
        if not (self.T > 0 and math.isfinite(self.T)):
            raise ValueError(f"T must be positive and finite, got {self.T}")
        if self.nt < 1:
            raise ValueError(f"nt must be >= 1, got {self.nt}")
        if self.nx < 2:
            raise ValueError(f"nx must be >= 2, got {self.nx}")

    @classmethod
    def from_steps(cls, T: float, dt: float, dx: float) -> "SpaceTimeGrid":
        """Build a grid from step sizes; both must divide the domain evenly."""
        nt = int(round(T / dt))
        nx = int(round(1.0 / dx))
        if not math.isclose(nt * dt, T, rel_tol=1e-9):
            raise ValueError(f"dt={dt} does not divide T={T}")
        if not math.isclose(nx * dx, 1.0, rel_tol=1e-9):
            raise ValueError(f"dx={dx} does not divide the unit interval")
        return cls(T=T, nt=nt, nx=nx)

    @property
    def dt(self) -> float:
        return self.T / self.nt

    @property
    def dx(self) -> float:
        return 1.0 / self.nx

    @property
    def n_interior(self) -> int:
        return self.nx - 1

    @property
    def x(self) -> np.ndarray:
        return np.arange(1, self.nx) * self.dx

    @property
    def t(self) -> np.ndarray:
        return np.arange(self.nt) * self.dt

    @property
    def shape(self) -> tuple[int, int]:
        return (self.nt, self.nx - 1)


@dataclass(frozen=True)
class ScalarField1D:
    """Real values on the interior nodes of ``grid``."""

    grid: SpaceTimeGrid
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.shape != (self.grid.n_interior,):
            raise ValueError(f"expected {self.grid.n_interior} values, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("field values must be finite")
        v = v.copy()
        v.setflags(write=False)
        object.__setattr__(self, "values", v)


def sample_field(f: Callable[[np.ndarray], np.ndarray], grid: SpaceTimeGrid) -> ScalarField1D:
    """Evaluate ``f`` on the interior nodes, ``values[j-1] = f(j * dx)``."""
    x = grid.x
    v = np.broadcast_to(np.asarray(f(x), dtype=np.float64), x.shape)
    bad = ~np.isfinite(v)
    if bad.any():
        j = int(np.argmax(bad)) + 1
        raise ValueError(f"non-finite value at node x={j * grid.dx:g}")
    return ScalarField1D(grid, v)


def _logistic(y):
    # 1 / (1 + exp(50 y)) without overflow warnings
    return 0.5 * (1.0 - np.tanh(25.0 * np.asarray(y, dtype=np.float64)))


@dataclass(frozen=True)
class DiffusivityField:
    """Diffusivity profile ``x -> theta(x)`` on ``[0, 1]``.

    ``derivative`` is optional; when it is missing a central difference is
    used. ``kind``/``params`` describe how the field was built so that it can
    be written to and read from a config file.
    """

    func: Callable[[np.ndarray], np.ndarray]
    theta_min: float
    theta_max: float
    regularity: str = "smooth"
    derivative: Optional[Callable[[np.ndarray], np.ndarray]] = None
    kind: str = "custom"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.theta_min > 0:
            raise ValueError("theta_min must be positive")
        if self.theta_max < self.theta_min:
            raise ValueError("theta_max < theta_min")
        if self.regularity not in ("constant", "smooth"):
            raise ValueError(f"unknown regularity tag {self.regularity!r}")

    def __call__(self, x) -> np.ndarray:
        return np.asarray(self.func(np.asarray(x, dtype=np.float64)), dtype=np.float64)

    def grad(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if self.derivative is not None:
            return np.asarray(self.derivative(x), dtype=np.float64)
        h = 1e-6
        return (self(x + h) - self(x - h)) / (2 * h)

    @property
    def is_constant(self) -> bool:
        return self.regularity == "constant"

    def check_bounds(self, x) -> None:
        v = self(x)
        if np.any(v < self.theta_min * (1 - 1e-12)) or np.any(v > self.theta_max * (1 + 1e-12)):
            raise ValueError("diffusivity leaves its declared bounds")

    @classmethod
    def constant(cls, value: float) -> "DiffusivityField":
        value = float(value)
        return cls(
            func=lambda x: np.full(np.shape(x), value),
            theta_min=value,
            theta_max=value,
            regularity="constant",
            derivative=lambda x: np.zeros(np.shape(x)),
            kind="constant",
            params={"value": value},
        )

    @classmethod
    def two_plateau(cls, left: float = 0.04, right: float = 0.02) -> "DiffusivityField":
        """``left * psi(x - 0.4) + right * psi(0.6 - x)`` with ``psi(y) = 1/(1 + e^{50 y})``.

        Plateaus at ``left`` for small x and ``right`` for large x, with a
        narrow trough around x = 0.5 where both logistic factors are small.
        """

        def f(x):
            return left * _logistic(x - 0.4) + right * _logistic(0.6 - x)

        def df(x):
            p1 = _logistic(x - 0.4)
            p2 = _logistic(0.6 - x)
            return -50.0 * left * p1 * (1 - p1) + 50.0 * right * p2 * (1 - p2)

        xs = np.linspace(0.0, 1.0, 20001)
        v = f(xs)
        return cls(
            func=f,
            theta_min=float(v.min()) * (1 - 1e-9),
            theta_max=float(v.max()) * (1 + 1e-9),
            regularity="smooth",
            derivative=df,
            kind="two_plateau",
            params={"left": left, "right": right},
        )

    @classmethod
    def from_spec(cls, spec: dict) -> "DiffusivityField":
        """Build from a config table ``{kind = ..., params = {...}}``."""
        kind = spec.get("kind")
        params = dict(spec.get("params", {}))
        if kind == "constant":
            return cls.constant(params.get("value", 0.02))
        if kind in ("two_plateau", "logistic"):
            return cls.two_plateau(**params)
        raise ValueError(f"unknown diffusivity kind {kind!r}")


@dataclass(frozen=True)
class SeedSpec:
    """Master seed plus trajectory index.

    Noise is drawn in blocks of ``NOISE_BLOCK`` rows. Each block has its own
    stream keyed by (seed, trajectory, purpose, block), so any block can be
    regenerated on its own and results never depend on scheduling.
    """

    seed: int
    trajectory: int = 0

    def __post_init__(self):
        if not (0 <= self.seed < 2**64):
            raise ValueError("seed must be an unsigned 64-bit integer")
        if self.trajectory < 0:
            raise ValueError("trajectory index must be non-negative")

    def generator(self, purpose: str, block: int) -> np.random.Generator:
        ss = np.random.SeedSequence(self.seed, spawn_key=(self.trajectory, _PURPOSES[purpose], block))
        return np.random.Generator(np.random.PCG64(ss))

    def for_trajectory(self, index: int) -> "SeedSpec":
        return SeedSpec(self.seed, index)

    def normal_blocks(self, purpose: str, n_rows: int, n_cols: int, start: int = 0) -> Iterator[tuple[int, np.ndarray]]:
        """Yield ``(row0, block)`` standard normal arrays covering rows ``start .. n_rows-1``.

        ``start`` must be a multiple of ``NOISE_BLOCK``. The yielded array is
        reused between iterations; copy it if it has to outlive the loop body.
        """
        if start % NOISE_BLOCK:
            raise ValueError("start must be aligned to NOISE_BLOCK")
        buf = np.empty((NOISE_BLOCK, n_cols))
        for row0 in range(start, n_rows, NOISE_BLOCK):
            m = min(NOISE_BLOCK, n_rows - row0)
            out = buf[:m]
            self.generator(purpose, row0 // NOISE_BLOCK).standard_normal(out=out)
            yield row0, out


# ---------------------------------------------------------------------------
# serialization

_MAGIC = b"HEST1"
_HEADER = struct.Struct("<5sQQd")


def write_binary(path, values: np.ndarray, grid: SpaceTimeGrid) -> None:
    """Write ``values`` (rows x interior nodes) in the HEST1 layout.

    Header: magic, nt, nx (little-endian uint64) and T (little-endian float64),
    then the values as row-major little-endian float64. A single field is
    stored as one row.
    """
    v = np.ascontiguousarray(np.atleast_2d(values), dtype="<f8")
    if v.shape[1] != grid.n_interior:
        raise ValueError("column count does not match the grid")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, grid.nt, grid.nx, grid.T))
        fh.write(v.tobytes(order="C"))


def read_binary(path) -> tuple[SpaceTimeGrid, np.ndarray]:
    raw = Path(path).read_bytes()
    magic, nt, nx, T = _HEADER.unpack_from(raw)
    if magic != _MAGIC:
        raise ValueError(f"{path}: not a HEST1 file")
    grid = SpaceTimeGrid(T=T, nt=int(nt), nx=int(nx))
    data = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size)
    ncol = grid.n_interior
    if data.size % ncol:
        raise ValueError(f"{path}: truncated payload")
    return grid, data.reshape(-1, ncol).astype(np.float64)


class BinaryWriter:
    """Streams rows into a HEST1 file; use as a context manager."""

    def __init__(self, path, grid: SpaceTimeGrid):
        self.grid = grid
        self._fh = open(path, "wb")
        self._fh.write(_HEADER.pack(_MAGIC, grid.nt, grid.nx, grid.T))
        self.rows = 0

    def write(self, rows: np.ndarray) -> None:
        v = np.ascontiguousarray(np.atleast_2d(rows), dtype="<f8")
        if v.shape[1] != self.grid.n_interior:
            raise ValueError("column count does not match the grid")
        self._fh.write(v.tobytes(order="C"))
        self.rows += v.shape[0]

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def open_binary(path) -> tuple[SpaceTimeGrid, np.ndarray]:
    """Like :func:`read_binary` but memory-maps the payload read-only."""
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
    if len(head) < _HEADER.size:
        raise ValueError(f"{path}: truncated header")
    magic, nt, nx, T = _HEADER.unpack(head)
    if magic != _MAGIC:
        raise ValueError(f"{path}: not a HEST1 file")
    grid = SpaceTimeGrid(T=T, nt=int(nt), nx=int(nx))
    size = Path(path).stat().st_size - _HEADER.size
    ncol = grid.n_interior
    if size % (8 * ncol):
        raise ValueError(f"{path}: truncated payload")
    data = np.memmap(path, dtype="<f8", mode="r", offset=_HEADER.size, shape=(size // (8 * ncol), ncol))
    return grid, data


def write_csv(path, values: np.ndarray, grid: SpaceTimeGrid, t_stride: int = 1, x_stride: int = 1) -> None:
    """Long-format CSV ``t,x,value``; strides thin out large fields."""
    v = np.atleast_2d(values)
    t = grid.t[: v.shape[0]] if v.shape[0] > 1 else np.zeros(1)
    x = grid.x
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "x", "value"])
        for i in range(0, v.shape[0], t_stride):
            for j in range(0, v.shape[1], x_stride):
                w.writerow([repr(float(t[i])), repr(float(x[j])), repr(float(v[i, j]))])
