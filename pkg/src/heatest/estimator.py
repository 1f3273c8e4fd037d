"""Localized least-squares estimation of the diffusivity at a point.

For a point ``x0`` and noise level ``eps`` the observation is tested against
localized kernels on a space-time lattice: windows ``k`` in time and shifts
``x`` (spaced 2 kernel half-widths apart) in space. With the statistics
``X'`` and ``X^Delta`` of each lattice cell the estimator is

    theta_hat = sum_k sum_x w(x) X^Delta_{k-1,x} X'_{k,x}
                / sum_k sum_x w(x) X^Delta_{k-1,x} X^Delta_{k,x},

the previous window acting as an instrument that decorrelates the
denominator from the static noise.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Sequence, Union

import numpy as np
from scipy import stats as sstats

from .grid import DiffusivityField, SpaceTimeGrid
from .kernels import (
    MIN_CELLS_PER_HALFWIDTH,
    MIN_STEPS_PER_WINDOW,
    Kernel,
    bump_kernel,
    delta_order_kernel,
    kernel_norms,
    sigma_K_sq,
)
from .riemann import DERIVATIVE_MODES, WindowSums, n_windows, spatial_profiles
from .sim import Observation, discretize_diffusion

__all__ = [
    "DomainTooSmall",
    "BandwidthTooSmall",
    "WeightInfeasible",
    "DegenerateInformation",
    "DiagnosticsUnavailable",
    "CLTInapplicable",
    "EstimatorConfig",
    "ShiftGrid",
    "WeightVector",
    "EstimateReport",
    "build_shift_grid",
    "build_weights",
    "ratio_estimate",
    "estimate",
    "estimate_from_sums",
    "error_decomposition",
    "estimate_noise_level",
    "confidence_interval",
    "estimate_profile",
    "make_kernel",
]


class DomainTooSmall(ValueError):
    """No spatial shift keeps the kernel support inside the domain."""


class BandwidthTooSmall(ValueError):
    """The weight window contains no shift."""


class WeightInfeasible(ValueError):
    """The moment conditions cannot be met on the available shifts."""


class DegenerateInformation(ArithmeticError):
    """The empirical information term is numerically zero."""


class DiagnosticsUnavailable(ValueError):
    """The observation carries no clean trajectory to evaluate bias terms."""


class CLTInapplicable(ArithmeticError):
    """The limiting lag covariance is not positive, so no normal approximation."""


def make_kernel(family: str = "bump", delta_order: int = 0) -> Kernel:
    if family not in ("bump", "paper-bump"):
        raise ValueError(f"unknown kernel family {family!r}")
    return delta_order_kernel(bump_kernel(), delta_order)


@dataclass(frozen=True)
class EstimatorConfig:
    """Settings for one point estimate.

    ``h`` is the bandwidth in space units or ``"auto"`` for
    ``eps^{3/(4 gamma + 2)}``. ``derivatives`` selects how kernel derivatives
    enter the Riemann sums: ``"grid"`` uses the discrete operators adjoint to
    the simulator, ``"analytic"`` the exact derivatives of the kernel.
    """

    eps: float
    x0: float = 0.5
    h: Union[float, str] = "auto"
    weight_scheme: str = "uniform"
    gamma: float = 1.0
    margin_factor: float = 0.1
    delta_variant: str = "sqrt_eps"
    sigma: float = 1.0
    derivatives: str = "grid"
    kernel_family: str = "bump"
    delta_order: int = 0
    info_floor: float = 1e-12
    min_cells: float = MIN_CELLS_PER_HALFWIDTH
    min_steps: float = MIN_STEPS_PER_WINDOW

    def __post_init__(self):
        if not (self.eps > 0 and math.isfinite(self.eps)):
            raise ValueError("eps must be positive")
        if not 0 < self.x0 < 1:
            raise ValueError("x0 must lie in (0, 1)")
        if self.weight_scheme not in ("uniform", "loclin"):
            raise ValueError(f"unknown weight scheme {self.weight_scheme!r}")
        if self.delta_variant not in ("sqrt_eps", "sqrt_eps_over_sigma"):
            raise ValueError(f"unknown delta variant {self.delta_variant!r}")
        if self.derivatives not in DERIVATIVE_MODES:
            raise ValueError(f"unknown derivative mode {self.derivatives!r}")
        if self.gamma < 1:
            raise ValueError("gamma must be >= 1")
        if self.margin_factor < 0:
            raise ValueError("margin_factor must be non-negative")
        if self.delta_variant == "sqrt_eps_over_sigma" and not self.sigma > 0:
            raise ValueError("sqrt_eps_over_sigma needs sigma > 0")
        if isinstance(self.h, str):
            if self.h != "auto":
                raise ValueError(f"h must be a number or 'auto', got {self.h!r}")
        elif not 0 < self.h <= 1:
            raise ValueError("h must lie in (0, 1]")
        if self.bandwidth < self.delta * (1 - 1e-12):
            raise ValueError(f"bandwidth h={self.bandwidth:g} is below the kernel scale delta={self.delta:g}")

    @property
    def scale(self) -> float:
        """Localization scale ``delta^2``."""
        if self.delta_variant == "sqrt_eps":
            return self.eps
        return self.eps / self.sigma

    @property
    def delta(self) -> float:
        return math.sqrt(self.scale)

    @property
    def bandwidth(self) -> float:
        if self.h == "auto":
            return self.eps ** (3.0 / (4.0 * self.gamma + 2.0))
        return float(self.h)

    @property
    def kernel(self) -> Kernel:
        return make_kernel(self.kernel_family, self.delta_order)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class ShiftGrid:
    """Spatial shifts (in units of delta) and the number of usable windows."""

    shifts: np.ndarray
    N_eps: int
    delta: float
    x0: float
    margin: float

    @property
    def n_shifts(self) -> int:
        return int(self.shifts.size)

    @property
    def n_eff(self) -> int:
        return self.N_eps * self.n_shifts


@dataclass(frozen=True)
class WeightVector:
    shifts: np.ndarray
    weights: np.ndarray

    def as_dict(self) -> dict:
        return {float(s): float(w) for s, w in zip(self.shifts, self.weights)}

    def scaled(self, c: float) -> "WeightVector":
        return WeightVector(self.shifts, self.weights * c)


@dataclass
class EstimateReport:
    """Result of one estimate; diagnostic fields stay None unless requested."""

    theta_hat: float
    I: float
    numerator: float
    x0: float
    eps: float
    delta: float
    h: float
    N_eps: int
    n_shifts: int
    n_weighted: int
    sigma_K_sq: Optional[float] = None
    B: Optional[float] = None
    M: Optional[float] = None
    qv_M: Optional[float] = None
    theta_true: Optional[float] = None
    ci: Optional[tuple] = None
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        if self.ci is not None:
            d["ci"] = {"lower": self.ci[0], "upper": self.ci[1], "level": self.ci[2]}
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def build_shift_grid(config: EstimatorConfig, grid: SpaceTimeGrid) -> ShiftGrid:
    """Even shifts ``2k`` whose supports stay ``margin_factor * delta`` inside the domain."""
    delta = config.delta
    margin = config.margin_factor * delta
    tol = 1e-9
    # support (x0 + delta(2k-1), x0 + delta(2k+1)) inside [margin, 1 - margin]
    k_lo = math.ceil(((margin - config.x0) / delta + 1) / 2 - tol)
    k_hi = math.floor(((1 - margin - config.x0) / delta - 1) / 2 + tol)
    if k_hi < k_lo:
        raise DomainTooSmall(f"no admissible shift for delta={delta:g} at x0={config.x0:g}")
    shifts = 2.0 * np.arange(k_lo, k_hi + 1)
    N = n_windows(grid.T, config.scale)
    if N < 1:
        raise DomainTooSmall(f"horizon T={grid.T} holds fewer than two time windows")
    return ShiftGrid(shifts, N, delta, config.x0, margin)


def build_weights(scheme: str, shift_grid: ShiftGrid, h: float, eps: Optional[float] = None) -> WeightVector:
    """Weights on the shifts with ``|x| < h / (2 delta)``.

    ``uniform`` puts equal mass on the shifts whose mirror image is also
    available, which keeps the first moment at zero next to the boundary.
    ``loclin`` is the least-norm solution of ``sum w = 1, sum x w = 0`` on the
    whole window. ``eps`` (localization scale) defaults to the grid's delta^2.
    """
    delta = math.sqrt(eps) if eps is not None else shift_grid.delta
    radius = h / delta / 2
    x = shift_grid.shifts
    inside = x[np.abs(x) < radius]
    if inside.size == 0:
        raise BandwidthTooSmall(f"no shift within |x| < {radius:g}")
    if scheme == "uniform":
        sym = inside[np.isin(-inside, inside)]
        if sym.size == 0:
            raise WeightInfeasible("no symmetric pair of shifts inside the window")
        w = np.full(sym.size, 1.0 / sym.size)
        return WeightVector(sym, w)
    if scheme == "loclin":
        if np.all(inside == 0):
            return WeightVector(inside, np.ones(inside.size) / inside.size)
        if np.all(inside > 0) or np.all(inside < 0):
            raise WeightInfeasible("all shifts lie on one side of x0")
        n = inside.size
        s1 = inside.sum()
        s2 = (inside * inside).sum()
        G = np.array([[n, s1], [s1, s2]], dtype=np.float64)
        if abs(np.linalg.det(G)) <= 1e-14 * max(1.0, n * s2):
            raise WeightInfeasible("moment system is singular")
        lam = np.linalg.solve(G, np.array([1.0, 0.0]))
        w = lam[0] + lam[1] * inside
        # one step of iterative refinement pushes the residuals to rounding level
        r = np.array([1.0 - w.sum(), -(inside * w).sum()])
        w = w + (lambda c: c[0] + c[1] * inside)(np.linalg.solve(G, r))
        return WeightVector(inside, w)
    raise ValueError(f"unknown weight scheme {scheme!r}")


def ratio_estimate(xprime: np.ndarray, xdelta: np.ndarray, weights: np.ndarray) -> tuple[float, float, float]:
    """``(theta_hat, numerator, I)`` from per-cell statistics ``(N+1, n_shifts)``."""
    inst = xdelta[:-1] * weights
    num = float(np.sum(inst * xprime[1:]))
    I = float(np.sum(inst * xdelta[1:]))
    return num / I if I != 0 else math.nan, num, I


def _check_information(I: float, xdelta: np.ndarray, weights: np.ndarray, floor: float) -> None:
    ref = float(np.sum(np.abs(weights) * xdelta[:-1] ** 2))
    if not math.isfinite(I) or abs(I) <= floor * ref or ref == 0:
        raise DegenerateInformation(f"information term {I:.3e} below {floor:g} x {ref:.3e}")



def _sums(values, grid, config: EstimatorConfig) -> WindowSums:
    return WindowSums.from_field(
        values,
        grid,
        config.kernel,
        config.scale,
        derivatives=config.derivatives,
        min_cells=config.min_cells,
        min_steps=config.min_steps,
    )


def _report(config, sg, wv, theta_hat, num, I) -> EstimateReport:
    return EstimateReport(
        theta_hat=theta_hat,
        I=I,
        numerator=num,
        x0=config.x0,
        eps=config.eps,
        delta=config.delta,
        h=config.bandwidth,
        N_eps=sg.N_eps,
        n_shifts=sg.n_shifts,
        n_weighted=int(wv.shifts.size),
        config=config.to_dict(),
    )


def estimate_from_sums(
    ysums: WindowSums,
    config: EstimatorConfig,
    xsums: Optional[WindowSums] = None,
    theta_true: Optional[DiffusivityField] = None,
    sigma: Optional[float] = None,
    weights: Optional[WeightVector] = None,
) -> EstimateReport:
    """Estimate from precomputed window sums of the observation.

    With ``xsums`` (sums of the clean signal) and ``theta_true`` the report
    also carries the bias ``B``, martingale ``M`` and its quadratic
    variation ``qv_M`` for dynamic noise level ``sigma``.
    """
    grid = ysums.grid
    if not math.isclose(ysums.eps, config.scale, rel_tol=1e-12) or ysums.derivatives != config.derivatives:
        raise ValueError("window sums do not match the configuration")
    sg = build_shift_grid(config, grid)
    wv = weights if weights is not None else build_weights(config.weight_scheme, sg, config.bandwidth)
    prof = spatial_profiles(grid, config.kernel, config.scale, config.x0, wv.shifts, config.derivatives)
    xprime, xdelta = ysums.statistics(prof)
    theta_hat, num, I = ratio_estimate(xprime, xdelta, wv.weights)
    _check_information(I, xdelta, wv.weights, config.info_floor)
    rep = _report(config, sg, wv, theta_hat, num, I)
    if xsums is None:
        return rep
    if theta_true is None or sigma is None:
        raise ValueError("diagnostics need the true diffusivity and sigma")
    theta0 = float(theta_true(np.array([config.x0]))[0])
    if theta_true.is_constant:
        B = 0.0
    else:
        if config.derivatives == "grid":
            A = discretize_diffusion(theta_true, grid)
            bprof = A.apply(prof["value"].T).T - theta0 * prof["lap"]
        else:
            xg = grid.x[:, None]
            bprof = (theta_true(xg) - theta0) * prof["lap"] + theta_true.grad(xg) * prof["grad"]
        bias_cells = xsums.project(bprof, "value")
        B = float(np.sum(xdelta[:-1] * wv.weights * bias_cells[1:]))
    skk = sigma_K_sq(config.kernel, sigma, theta0)
    rep.sigma_K_sq = skk
    rep.B = B
    rep.M = (theta_hat - theta0) * I - B
    rep.qv_M = skk * float(np.sum((wv.weights * xdelta[:-1]) ** 2))
    rep.theta_true = theta0
    return rep


def estimate(obs: Observation, config: EstimatorConfig) -> EstimateReport:
    """Point estimate ``theta_hat(x0)`` from an observation held in memory."""
    ysums = _sums(obs.values, obs.grid, config)
    return estimate_from_sums(ysums, config)


def error_decomposition(obs: Observation, config: EstimatorConfig, theta_true: DiffusivityField):
    """``(I, B, M, qv_M)`` with ``theta_hat - theta(x0) = (M + B) / I``.

    Needs the clean trajectory behind the observation.
    """
    traj = obs.trajectory
    if traj is None:
        raise DiagnosticsUnavailable("observation has no trajectory back-reference")
    ysums = _sums(obs.values, obs.grid, config)
    xsums = _sums(traj.snapshots, obs.grid, config)
    rep = estimate_from_sums(ysums, config, xsums, theta_true, traj.sigma)
    return rep.I, rep.B, rep.M, rep.qv_M


def estimate_noise_level(obs: Observation, probe) -> float:
    """Static noise level from the quadratic variation of the time-integrated projection.

    With ``Z_i = dt * sum_j probe(x_j) Y_ij dx`` the increments of ``Z``
    are dominated by the static noise, so
    ``eps_hat^2 = sum_i (Z_{i+1} - Z_i)^2 / (2 ||probe||^2 T)``.
    """
    grid = obs.grid
    p = np.asarray(probe(grid.x) if callable(probe) else probe, dtype=np.float64)
    norm2 = float(np.sum(p * p) * grid.dx)
    if norm2 == 0:
        raise ValueError("probe vanishes on the grid")
    Z = (np.asarray(obs.values) @ p) * grid.dx * grid.dt
    return math.sqrt(float(np.sum(np.diff(Z) ** 2)) / (2 * norm2 * grid.T))


def noise_level_from_projection(Z: np.ndarray, norm2: float, T: float) -> float:
    """Same as :func:`estimate_noise_level` for an already projected series."""
    return math.sqrt(float(np.sum(np.diff(Z) ** 2)) / (2 * norm2 * T))


def confidence_interval(
    report: EstimateReport,
    level: float = 0.95,
    c_inf_auto: Optional[dict] = None,
    sigma: Optional[float] = None,
    T: float = 1.0,
) -> tuple[float, float, float]:
    """Normal interval ``theta_hat +- z * eps^{3/4} * sqrt(V / (T C_X))`` in the parametric regime.

    ``V = sigma_K^2 (C(dK, dK) + ||dK||^2) / C(dK, dK_lag)^2`` with
    ``dK`` the Laplacian of the kernel, ``C`` the limiting covariance
    constants at ``theta_hat`` and ``C_X = |shifts| * eps^{1/2}``.
    ``c_inf_auto`` may carry precomputed ``{"same": ..., "lag": ...}``.
    """
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    cfg = report.config
    if cfg.get("delta_variant", "sqrt_eps") != "sqrt_eps":
        raise ValueError("the interval is implemented for delta = sqrt(eps)")
    sigma = cfg.get("sigma", 1.0) if sigma is None else sigma
    theta = report.theta_hat
    if not theta > 0:
        raise CLTInapplicable(f"theta_hat={theta:g} is not positive")
    kernel = make_kernel(cfg.get("kernel_family", "bump"), cfg.get("delta_order", 0))
    if c_inf_auto is None:
        from .oracle import limiting_constants

        c_inf_auto = limiting_constants(kernel, theta, sigma)
    c_same, c_lag = float(c_inf_auto["same"]), float(c_inf_auto["lag"])
    if not c_lag > 0:
        raise CLTInapplicable(f"lagged limiting covariance {c_lag:g} is not positive")
    skk = sigma_K_sq(kernel, sigma, theta)
    lap2 = kernel_norms(kernel)["lapK"]
    eps = report.eps
    c_x = report.n_weighted * math.sqrt(eps)
    z = float(sstats.norm.ppf(0.5 + level / 2))
    hw = z * eps**0.75 * math.sqrt(skk * (c_same + lap2) / (T * c_x * c_lag**2))
    report.ci = (theta - hw, theta + hw, level)
    return report.ci


def estimate_profile(
    obs: Observation,
    x0_list: Sequence[float],
    template: EstimatorConfig,
    ysums: Optional[WindowSums] = None,
) -> list:
    """Independent estimates at each ``x0`` sharing one pass over the data.

    Failures at individual points are returned in place of the report.
    """
    if ysums is None:
        ysums = _sums(obs.values, obs.grid, template)
    out = []
    for x0 in x0_list:
        try:
            out.append(estimate_from_sums(ysums, replace(template, x0=float(x0))))
        except (ValueError, ArithmeticError) as exc:
            out.append(exc)
    return out
