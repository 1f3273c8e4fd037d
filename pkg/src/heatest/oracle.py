"""Semi-analytic reference values for the constant-diffusivity model.

* ``spectral_covariance``: exact covariance of two space-time projections of
  the solution through the Dirichlet sine eigenbasis.
* ``c_infinity``: the whole-line limit of the covariance of localized
  statistics, by FFT in space.
* ``dirichlet_semigroup`` / ``trotter_kato_error``: the heat semigroup on a
  rescaled interval against the whole-line heat semigroup.

All double time integrals ``int int f(t) g(s) exp(-lam |t - s|)`` are computed
with piecewise-linear interpolation of ``g`` and an exact exponential
recursion, which stays accurate however large ``lam * dt`` gets.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from typing import Callable, Optional, Sequence

import numba
import numpy as np
from scipy import fft as sfft

from .grid import DiffusivityField
from .kernels import Kernel, LocalizedKernel

__all__ = [
    "DivergentConstant",
    "SemigroupNotConverged",
    "OracleRecord",
    "SeparableFunction",
    "SpectralOracle",
    "spectral_covariance",
    "exp_double_integral",
    "c_infinity",
    "limiting_constants",
    "gradient_identity_rhs",
    "laplacian_of",
    "gradient_of",
    "probe_from_localized",
    "dirichlet_semigroup",
    "heat_semigroup_line",
    "trotter_kato_error",
]


class DivergentConstant(ArithmeticError):
    """The limiting covariance integral is not absolutely convergent."""


class SemigroupNotConverged(RuntimeError):
    """Internal refinement of the semigroup solver did not converge."""


@dataclass(frozen=True)
class OracleRecord:
    quantity: str
    params: dict
    value: float
    error_bound: float

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class SeparableFunction:
    """``phi(t, x) = time(t) * space(x)`` with compact support."""

    time: Callable[[np.ndarray], np.ndarray]
    space: Callable[[np.ndarray], np.ndarray]
    t_support: tuple
    x_support: tuple
    label: str = ""

    def __call__(self, t, x):
        return self.time(np.asarray(t, dtype=np.float64)) * self.space(np.asarray(x, dtype=np.float64))


# ---------------------------------------------------------------------------
# exact exponential time integrals


@numba.njit(cache=True, nogil=True, inline="always")
def _phi_weights(z):
    # phi_a = int_0^1 (1-u) e^{-z u} du, phi_b = int_0^1 u e^{-z u} du
    if z < 1e-2:
        z2 = z * z
        pa = 0.5 - z / 6.0 + z2 / 24.0 - z2 * z / 120.0 + z2 * z2 / 720.0
        pb = 0.5 - z / 3.0 + z2 / 8.0 - z2 * z / 30.0 + z2 * z2 / 144.0
        return pa, pb
    e = math.exp(-z)
    pa = (z - 1.0 + e) / (z * z)
    pb = (1.0 - (1.0 + z) * e) / (z * z)
    return pa, pb


@numba.njit(cache=True, nogil=True)
def _exp_integrals(f, g, h, lam, t0):
    """For each lam: (int int f g e^{-lam|t-s|}, int f e^{-lam t}, int g e^{-lam t}).

    ``f`` and ``g`` are samples on the grid ``t0 + i h``; ``g`` is
    interpolated linearly inside the recursion and the outer integral uses
    Simpson's rule on odd-length grids, the trapezoid rule otherwise.
    """
    n = f.shape[0]
    nl = lam.shape[0]
    J = np.empty(nl)
    Lf = np.empty(nl)
    Lg = np.empty(nl)
    um = np.empty(n)
    up = np.empty(n)
    for q in range(nl):
        lm = lam[q]
        z = lm * h
        pa, pb = _phi_weights(z)
        e = math.exp(-z)
        um[0] = 0.0
        for i in range(n - 1):
            # int_{t_i}^{t_{i+1}} g(s) e^{-lam (t_{i+1} - s)} ds
            um[i + 1] = e * um[i] + h * (pb * g[i] + pa * g[i + 1])
        up[n - 1] = 0.0
        for i in range(n - 2, -1, -1):
            up[i] = e * up[i + 1] + h * (pa * g[i] + pb * g[i + 1])
        if n % 2 == 1:
            # composite Simpson on an even number of panels
            acc = f[0] * (um[0] + up[0]) + f[n - 1] * (um[n - 1] + up[n - 1])
            for i in range(1, n - 1):
                acc += (4.0 if i % 2 == 1 else 2.0) * f[i] * (um[i] + up[i])
            J[q] = acc * h / 3.0
        else:
            acc = 0.5 * (f[0] * (um[0] + up[0]) + f[n - 1] * (um[n - 1] + up[n - 1]))
            for i in range(1, n - 1):
                acc += f[i] * (um[i] + up[i])
            J[q] = acc * h
        # Laplace transforms, exact for piecewise-linear samples
        sf = 0.0
        sg = 0.0
        decay = 1.0
        for i in range(n - 1):
            sf += decay * (pa * f[i] + pb * f[i + 1])
            sg += decay * (pa * g[i] + pb * g[i + 1])
            decay *= e
            if decay < 1e-300:
                break
        scale = h * math.exp(-lm * t0)
        Lf[q] = sf * scale
        Lg[q] = sg * scale
    return J, Lf, Lg


def exp_double_integral(f: np.ndarray, g: np.ndarray, h: float, lam, t0: float = 0.0):
    """``(J, Lf, Lg)`` arrays over ``lam``; see :func:`_exp_integrals`."""
    lam = np.atleast_1d(np.asarray(lam, dtype=np.float64))
    f = np.ascontiguousarray(f, dtype=np.float64)
    g = np.ascontiguousarray(g, dtype=np.float64)
    if f.shape != g.shape or f.ndim != 1 or f.size < 2:
        raise ValueError("f and g must be 1-d samples on the same grid")
    return _exp_integrals(f, g, float(h), lam, float(t0))


def _time_grid(supports, n_t: int):
    lo = min(s[0] for s in supports)
    hi = max(s[1] for s in supports)
    t = np.linspace(lo, hi, n_t)
    return t, t[1] - t[0]


# ---------------------------------------------------------------------------
# spectral covariance on the unit interval


@dataclass(frozen=True)
class SpectralOracle:
    """Sine eigenbasis ``e_m = sqrt(2) sin(m pi x)``, ``lam_m = theta0 m^2 pi^2``."""

    theta0: float
    sigma: float
    n_modes: int = 4096
    n_space: int = 1 << 15
    n_time: int = 4001
    tolerance: float = 1e-8

    def __post_init__(self):
        if not self.theta0 > 0:
            raise ValueError("theta0 must be positive")
        if self.n_modes < 1 or self.n_modes >= self.n_space:
            raise ValueError("need 1 <= n_modes < n_space")

    @property
    def eigenvalues(self) -> np.ndarray:
        m = np.arange(1, self.n_modes + 1)
        return self.theta0 * (m * math.pi) ** 2

    def coefficients(self, space: Callable) -> tuple[np.ndarray, float]:
        """Sine coefficients ``<f, e_m>`` for ``m = 1..n_modes`` and ``||f||^2``."""
        N = self.n_space
        x = np.arange(1, N) / N
        fx = np.asarray(space(x), dtype=np.float64)
        c = sfft.dst(fx, type=1) / (math.sqrt(2.0) * N)
        return c[: self.n_modes], float(np.sum(fx * fx) / N)


def spectral_covariance(
    phi: SeparableFunction,
    psi: SeparableFunction,
    oracle: SpectralOracle,
    return_record: bool = False,
):
    """``Cov(<X, phi>, <X, psi>)`` for the zero-started solution with constant diffusivity.

    ``sigma^2/2 sum_m c_m d_m int int phi_t(t) psi_t(s)
    (e^{-lam_m |t-s|} - e^{-lam_m (t+s)}) / lam_m ds dt``.
    The reported error bound covers the discarded modes ``m > n_modes``.
    """
    for f in (phi, psi):
        if f.t_support[0] < 0 or f.x_support[0] < 0 or f.x_support[1] > 1:
            raise ValueError(f"test function {f.label!r} leaves the observation domain")
    c, nf = oracle.coefficients(phi.space)
    d, ng = oracle.coefficients(psi.space)
    t, h = _time_grid([phi.t_support, psi.t_support], oracle.n_time)
    ft = np.asarray(phi.time(t), dtype=np.float64)
    gt = np.asarray(psi.time(t), dtype=np.float64)
    lam = oracle.eigenvalues
    J, Lf, Lg = exp_double_integral(ft, gt, h, lam, t[0])
    terms = c * d * (J - Lf * Lg) / lam
    value = 0.5 * oracle.sigma**2 * float(np.sum(terms))
    # |J - Lf Lg| <= 2 ||f||_inf ||g||_1 / lam; Cauchy-Schwarz over the tail coefficients
    tail_c = math.sqrt(max(nf - float(np.sum(c * c)), 0.0))
    tail_d = math.sqrt(max(ng - float(np.sum(d * d)), 0.0))
    lam_next = oracle.theta0 * ((oracle.n_modes + 1) * math.pi) ** 2
    fmax, gl1 = float(np.max(np.abs(ft))), float(np.sum(np.abs(gt)) * h)
    bound = oracle.sigma**2 * fmax * gl1 * tail_c * math.sqrt(ng) / lam_next**2
    bound = min(bound, oracle.sigma**2 * fmax * gl1 * math.sqrt(nf) * tail_d / lam_next**2)
    if bound > oracle.tolerance * max(abs(value), 1e-300):
        warnings.warn(f"mode truncation bound {bound:.2e} exceeds the tolerance", RuntimeWarning)
    if return_record:
        params = {"theta0": oracle.theta0, "sigma": oracle.sigma, "n_modes": oracle.n_modes, "phi": phi.label, "psi": psi.label}
        return OracleRecord("spectral_covariance", params, value, bound)
    return value


def probe_from_localized(lk: LocalizedKernel, laplacian: bool = False) -> SeparableFunction:
    """The localized kernel (or its Laplacian) as a separable test function."""
    base = lk.base
    amp = lk.amplitude / (lk.eps if laplacian else 1.0)
    order = 2 if laplacian else 0
    (ta, tb), (ya, yb) = lk.support

    def time(t):
        return amp * base.time(lk.local_time(t), 0)

    def space(y):
        return base.space(lk.local_space(y), order)

    label = f"{'lap ' if laplacian else ''}kernel k={lk.k} x={lk.x} eps={lk.eps} x0={lk.x0}"
    return SeparableFunction(time, space, (ta, tb), (ya, yb), label)


# ---------------------------------------------------------------------------
# limiting constants on the whole line


def laplacian_of(kernel: Kernel, time_shift: float = 0.0) -> SeparableFunction:
    """``(t, x) -> Laplacian K(t - time_shift, x)``."""
    t0, t1 = kernel.time_support
    return SeparableFunction(
        lambda t: kernel.time(t - time_shift, 0),
        lambda x: kernel.space(x, 2),
        (t0 + time_shift, t1 + time_shift),
        kernel.space_support,
        f"lap K shift {time_shift:g}",
    )


def gradient_of(kernel: Kernel, time_shift: float = 0.0) -> SeparableFunction:
    t0, t1 = kernel.time_support
    return SeparableFunction(
        lambda t: kernel.time(t - time_shift, 0),
        lambda x: kernel.space(x, 1),
        (t0 + time_shift, t1 + time_shift),
        kernel.space_support,
        f"grad K shift {time_shift:g}",
    )


def c_infinity(
    phi: SeparableFunction,
    psi: SeparableFunction,
    theta0: float,
    sigma: float,
    half_width: float = 8.0,
    n_fft: int = 1 << 12,
    n_time: int = 4001,
) -> float:
    """``sigma^2/2 int int (2 pi)^-1 int phi^(t, xi) conj(psi^(s, xi)) e^{-theta0 xi^2 |t-s|} / (theta0 xi^2) dxi ds dt``.

    Space is transformed by FFT on ``[-half_width, half_width)``; the
    ``xi = 0`` value of the integrand is the limit from the neighbouring
    frequencies. Raises DivergentConstant when ``phi^ conj(psi^)`` does not
    vanish at ``xi = 0``.
    """
    if not theta0 > 0:
        raise ValueError("theta0 must be positive")
    L = 2.0 * half_width
    dx = L / n_fft
    x = -half_width + dx * np.arange(n_fft)
    fx = np.asarray(phi.space(x), dtype=np.float64)
    gx = np.asarray(psi.space(x), dtype=np.float64)
    fh = sfft.rfft(fx) * dx
    gh = sfft.rfft(gx) * dx
    xi = 2 * math.pi * np.arange(fh.size) / L
    prod = (fh * np.conj(gh)).real  # phase factors from the grid origin cancel
    scale = float(np.max(np.abs(fh)) * np.max(np.abs(gh)))
    if abs(prod[0]) > 1e-9 * scale:
        raise DivergentConstant("the spatial symbols do not vanish at frequency zero")
    t, h = _time_grid([phi.t_support, psi.t_support], n_time)
    lam = theta0 * xi**2
    J, _, _ = exp_double_integral(phi.time(t), psi.time(t), h, lam, t[0])
    integrand = np.empty_like(xi)
    integrand[1:] = prod[1:] * J[1:] / lam[1:]
    integrand[0] = (4 * integrand[1] - integrand[2]) / 3  # even in xi
    # full-line sum from the half spectrum: xi = 0 once, the Nyquist term once
    weights = np.full(xi.size, 2.0)
    weights[0] = 1.0
    if n_fft % 2 == 0:
        weights[-1] = 1.0
    dxi = 2 * math.pi / L
    return 0.5 * sigma**2 * float(np.sum(weights * integrand)) * dxi / (2 * math.pi)


@lru_cache(maxsize=256)
def _limiting_constants(kernel: Kernel, theta: float, sigma: float) -> tuple[float, float]:
    same = c_infinity(laplacian_of(kernel), laplacian_of(kernel), theta, sigma)
    lag = c_infinity(laplacian_of(kernel, -1.0), laplacian_of(kernel), theta, sigma)
    return same, lag


def limiting_constants(kernel: Kernel, theta: float, sigma: float) -> dict:
    """``{"same": C(dK, dK), "lag": C(dK_{-1}, dK)}`` for the Laplacian ``dK`` of ``kernel``."""
    same, lag = _limiting_constants(kernel, float(theta), float(sigma))
    return {"same": same, "lag": lag}


def gradient_identity_rhs(kernel: Kernel, theta0: float, sigma: float, n_space: int = 40001, n_time: int = 2001) -> float:
    """``sigma^2/(2 theta0) int int <grad K_t, S0(|t-s|) grad K_s> ds dt`` in real space.

    The spatial pairing ``h(r) = <b', p_r * b'>`` uses the autocorrelation of
    the spatial gradient against the Gaussian heat kernel, the time pairing
    the autocorrelation of the time factor. No Fourier transform is involved.
    """
    xs = np.linspace(-1, 1, n_space)
    dx = xs[1] - xs[0]
    gx = kernel.space(xs, 1)
    R = np.correlate(gx, gx, mode="full") * dx  # lags -2..2
    z = dx * np.arange(-(n_space - 1), n_space)
    ts = np.linspace(kernel.time_support[0], kernel.time_support[1], n_time)
    dt = ts[1] - ts[0]
    a = kernel.time(ts, 0)
    A = np.correlate(a, a, mode="full")[n_time - 1 :] * dt  # lags 0..1
    r = dt * np.arange(n_time)
    h = np.empty(n_time)
    h[0] = R[n_space - 1]
    for i in range(1, n_time):
        var = 2 * theta0 * r[i]
        if math.sqrt(var) < 5 * dx:
            # heat kernel narrower than the grid: second-order expansion in r
            R2 = (R[n_space] - 2 * R[n_space - 1] + R[n_space - 2]) / dx**2
            h[i] = R[n_space - 1] + theta0 * r[i] * R2
            continue
        p = np.exp(-(z**2) / (2 * var)) / math.sqrt(2 * math.pi * var)
        h[i] = float(np.sum(R * p) * dx)
    # the time pairing is symmetric in the lag
    w = np.full(n_time, dt)
    w[0] = w[-1] = dt / 2
    integral = 2 * float(np.sum(w * A * h))
    return sigma**2 / (2 * theta0) * integral


# ---------------------------------------------------------------------------
# semigroups


def heat_semigroup_line(phi: Callable, t: float, theta: float, z: np.ndarray, support=(-1.0, 1.0), n_quad: int = 1201) -> np.ndarray:
    """Whole-line heat semigroup ``exp(t theta d^2/dx^2) phi`` evaluated at ``z``.

    Exact Gaussian convolution by the trapezoid rule over the support of
    ``phi`` (spectrally accurate for smooth compactly supported ``phi``).
    """
    z = np.asarray(z, dtype=np.float64)
    if t == 0:
        return np.asarray(phi(z), dtype=np.float64)
    w = np.linspace(support[0], support[1], n_quad)
    dw = w[1] - w[0]
    fw = np.asarray(phi(w), dtype=np.float64)
    var = 2 * theta * t
    out = np.empty(z.shape)
    for lo in range(0, z.size, 2048):
        zz = z.ravel()[lo : lo + 2048, None]
        kern = np.exp(-((zz - w[None, :]) ** 2) / (2 * var))
        out.ravel()[lo : lo + 2048] = kern @ fw * dw / math.sqrt(2 * math.pi * var)
    return out


def _sine_semigroup(fx: np.ndarray, t: float, theta: float, length: float) -> np.ndarray:
    n = fx.size + 1
    c = sfft.dst(fx, type=1)
    m = np.arange(1, n)
    c *= np.exp(-theta * (m * math.pi / length) ** 2 * t)
    return sfft.idst(c, type=1)


@numba.njit(cache=True, nogil=True)
def _cn_march(u, off, diag, dt, n_steps):
    n = u.shape[0]
    # Thomas factorization of I - dt/2 A, reused for every step
    cp = np.empty(n)
    inv = np.empty(n)
    lo = -0.5 * dt * off
    d0 = 1.0 - 0.5 * dt * diag[0]
    inv[0] = 1.0 / d0
    cp[0] = lo[0] * inv[0] if n > 1 else 0.0
    for j in range(1, n):
        den = 1.0 - 0.5 * dt * diag[j] - lo[j - 1] * cp[j - 1]
        inv[j] = 1.0 / den
        cp[j] = lo[j] * inv[j] if j < n - 1 else 0.0
    rhs = np.empty(n)
    for _ in range(n_steps):
        for j in range(n):
            r = (1.0 + 0.5 * dt * diag[j]) * u[j]
            if j > 0:
                r += 0.5 * dt * off[j - 1] * u[j - 1]
            if j < n - 1:
                r += 0.5 * dt * off[j] * u[j + 1]
            rhs[j] = r
        rhs[0] = rhs[0] * inv[0]
        for j in range(1, n):
            rhs[j] = (rhs[j] - lo[j - 1] * rhs[j - 1]) * inv[j]
        u[n - 1] = rhs[n - 1]
        for j in range(n - 2, -1, -1):
            u[j] = rhs[j] - cp[j] * u[j + 1]
    return u


def _crank_nicolson(fx: np.ndarray, t: float, theta_mid: np.ndarray, dx: float, n_steps: int) -> np.ndarray:
    off = np.ascontiguousarray(theta_mid[1:-1] / dx**2)
    diag = np.ascontiguousarray(-(theta_mid[:-1] + theta_mid[1:]) / dx**2)
    return _cn_march(np.array(fx, dtype=np.float64), off, diag, t / n_steps, n_steps)


def dirichlet_semigroup(
    phi: Callable,
    t: float,
    L: Optional[float] = None,
    theta=1.0,
    domain: Optional[tuple] = None,
    dx: float = 0.02,
    tol: float = 1e-6,
    max_refine: int = 7,
    return_grid: bool = False,
):
    """Heat semigroup with Dirichlet boundaries on ``(-L, L)`` (or ``domain``).

    Returns a callable ``y -> (S(t) phi)(y)`` (linear interpolation on the
    final grid), or ``(nodes, values)`` when ``return_grid`` is set. A
    constant ``theta`` uses the sine eigenbasis; a DiffusivityField uses
    Crank-Nicolson in flux form, refining space and time together until the
    L2 change between refinements drops below ``tol``.
    """
    if domain is None:
        if L is None:
            raise ValueError("give L or domain")
        domain = (-L, L)
    a, b = map(float, domain)
    if not b > a:
        raise ValueError("empty domain")
    if t < 0:
        raise ValueError("t must be non-negative")
    length = b - a

    def nodes_for(step):
        n = max(int(math.ceil(length / step)), 4)
        return np.linspace(a, b, n + 1)[1:-1], length / n

    const = not isinstance(theta, DiffusivityField) or theta.is_constant
    if t == 0:
        y, h = nodes_for(dx / 4)
        vals = np.asarray(phi(y), dtype=np.float64)
    elif const:
        th = float(theta) if not isinstance(theta, DiffusivityField) else float(theta(np.array([a]))[0])
        y, h = nodes_for(dx / 4)
        vals = _sine_semigroup(np.asarray(phi(y), dtype=np.float64), t, th, length)
    else:
        # Crank-Nicolson is second order in (dx, dt) refined together, so one
        # Richardson step on the shared nodes removes the leading error;
        # refinement stops once the extrapolated solutions of two successive
        # levels agree. Each halving keeps the coarse nodes at odd indices.
        prev = prev_ext = None
        n_cells = max(int(math.ceil(length / dx)), 4)
        n_steps = max(int(math.ceil(t / (4 * dx))), 8)
        for _ in range(max_refine):
            h = length / n_cells
            yf = a + h * np.arange(1, n_cells)
            mid = a + h * (np.arange(n_cells) + 0.5)
            raw = _crank_nicolson(np.asarray(phi(yf), dtype=np.float64), t, theta(mid), h, n_steps)
            if prev is not None:
                y, hc = prev[0], 2 * h
                vals = (4 * raw[1::2] - prev[1]) / 3
                if prev_ext is not None:
                    diff = prev_ext[1] - vals[1::2]
                    if math.sqrt(float(np.sum(diff**2)) * 2 * hc) < tol:
                        h = hc
                        break
                prev_ext = (y, vals)
            prev = (yf, raw)
            n_cells *= 2
            n_steps *= 2
        else:
            raise SemigroupNotConverged(f"no convergence to {tol:g} after {max_refine} refinements")
    if return_grid:
        return y, vals
    yy = np.concatenate([[a], y, [b]])
    vv = np.concatenate([[0.0], vals, [0.0]])
    return lambda q: np.interp(q, yy, vv, left=0.0, right=0.0)


def trotter_kato_error(
    phi: Callable,
    t: float,
    delta: float,
    h: float,
    p: float = 2.0,
    theta=1.0,
    x0: float = 0.5,
    n_shifts: int = 9,
    support=(-1.0, 1.0),
    dx: float = 0.02,
    tol: float = 1e-6,
    truncate: bool = True,
) -> float:
    """``max_y ||(S_delta(t) - S_0(t)) phi(. - y)||_{L^p}`` over ``|y| <= h / delta``.

    ``S_delta`` is generated by ``theta(x0 + delta y)`` with Dirichlet
    boundaries on the rescaled domain ``(-x0/delta, (1-x0)/delta)``, ``S_0``
    by ``theta(x0)`` on the whole line. With ``truncate`` the Dirichlet problem
    is solved on a window around the shifted support that the heat flow
    cannot leave within round-off; the domain boundary is kept wherever it is
    closer.
    """
    if t == 0:
        return 0.0
    lo, hi = -x0 / delta, (1 - x0) / delta
    R = h / delta
    if isinstance(theta, DiffusivityField):
        field = theta
        th0 = float(field(np.array([x0]))[0])
        const = field.is_constant
        tmax = field.theta_max
    else:
        th0 = float(theta)
        const = True
        tmax = th0
    if const:
        theta_d = th0
    else:
        theta_d = DiffusivityField(
            func=lambda y: field(x0 + delta * np.asarray(y)),
            theta_min=field.theta_min,
            theta_max=field.theta_max,
            regularity="smooth",
        )
    spread = 12.0 * math.sqrt(2 * tmax * t)
    errs = []
    for y in np.linspace(-R, R, n_shifts):
        shifted = lambda q, y=y: phi(np.asarray(q) - y)
        s0, s1 = support[0] + y, support[1] + y
        if s0 < lo or s1 > hi:
            raise ValueError("shifted support leaves the rescaled domain")
        a, b = (max(lo, s0 - spread), min(hi, s1 + spread)) if truncate else (lo, hi)
        ys, vals = dirichlet_semigroup(shifted, t, theta=theta_d, domain=(a, b), dx=dx, tol=tol, return_grid=True)
        step = ys[1] - ys[0]
        # whole-line reference on the same nodes plus its tails outside (a, b)
        ref = heat_semigroup_line(shifted, t, th0, ys, support=(s0, s1))
        # S_0 is below 1e-30 farther than `spread` from the support
        tail_lo = np.arange(a - step, s0 - spread, -step)[::-1]
        tail_hi = np.arange(b + step, s1 + spread, step)
        tails = heat_semigroup_line(shifted, t, th0, np.concatenate([tail_lo, tail_hi]), support=(s0, s1))
        diff = np.concatenate([vals - ref, tails])
        if math.isinf(p):
            errs.append(float(np.max(np.abs(diff))))
        else:
            errs.append(float(np.sum(np.abs(diff) ** p) * step) ** (1 / p))
    return max(errs)
