"""Monte Carlo harness: replications, rate studies, profiles and oracle checks.

A replication simulates one trajectory and its static noise block by block
and never holds the full field in memory. While the rows stream by they are
folded into window sums for every localization scale in the plan, so one
trajectory serves all noise levels and bandwidth rules at once. The static
noise field does not depend on the noise level (only its amplitude does), so
the levels of one replication share it.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from . import __version__
from .estimator import (
    EstimatorConfig,
    confidence_interval,
    estimate_from_sums,
    noise_level_from_projection,
)
from .grid import DiffusivityField, SeedSpec, SpaceTimeGrid
from .oracle import SeparableFunction, SpectralOracle, spectral_covariance
from .riemann import RowProjector, WindowSums
from .sim import iter_trajectory, static_noise_eta

__all__ = [
    "Model",
    "Level",
    "Plan",
    "replicate",
    "run_replications",
    "fit_slope",
    "RateStudyResult",
    "rate_study",
    "rate_plan",
    "rate_rows",
    "profile_plan",
    "PROFILE_POINTS",
    "profile_study",
    "covariance_check",
    "noise_level_check",
    "RunManifest",
    "file_digest",
    "resolve_threads",
    "covariance_probes",
    "tk_constant_fit",
    "tk_hetero_fit",
    "c_infinity_convergence",
]


@dataclass(frozen=True)
class Model:
    """Signal model and discretization."""

    theta: DiffusivityField
    sigma: float = 10.0
    T: float = 1.0
    nx: int = 512
    dt: float = 4e-6
    noise_multiplier: float = 1.0  # test hook: rescales the dynamic noise

    @property
    def grid(self) -> SpaceTimeGrid:
        nt = int(round(self.T / self.dt))
        if not math.isclose(nt * self.dt, self.T, rel_tol=1e-9):
            raise ValueError(f"dt={self.dt} does not divide T={self.T}")
        return SpaceTimeGrid(self.T, nt, self.nx)


@dataclass(frozen=True)
class Level:
    """One noise level and the estimators evaluated at it.

    All configs must share the localization scale and derivative mode.
    ``ci`` marks the configs (by name) that get a confidence interval.
    """

    epsilon: float
    configs: dict
    ci: tuple = ()

    @property
    def scale(self) -> float:
        scales = {c.scale for c in self.configs.values()}
        if len(scales) != 1:
            raise ValueError("configs of one level must share the localization scale")
        return scales.pop()

    @property
    def derivatives(self) -> str:
        modes = {c.derivatives for c in self.configs.values()}
        if len(modes) != 1:
            raise ValueError("configs of one level must share the derivative mode")
        return modes.pop()


@dataclass(frozen=True)
class Plan:
    levels: tuple = ()
    probes: tuple = ()  # SeparableFunction test functions for <X, phi>
    noise_probe: Optional[Callable] = None  # spatial probe for the noise-level estimate
    noise_levels: tuple = ()
    diagnostics: bool = True


def _probe_projector(grid: SpaceTimeGrid, probes) -> Optional[RowProjector]:
    if not probes:
        return None
    tw = np.stack([np.asarray(p.time(grid.t), dtype=np.float64) for p in probes], axis=1)
    return RowProjector.dense(tw, grid.n_interior)


def replicate(model: Model, plan: Plan, seed: SeedSpec) -> dict:
    """Run one replication and return its (small) results.

    Keys: ``levels`` (per level, per config: report dict), ``probes``
    (values of ``<X, phi>``), ``noise`` (per noise level: ``eps_hat``).
    """
    grid = model.grid
    kernels = {}
    xsums, zsums = [], []
    for lv in plan.levels:
        cfg = next(iter(lv.configs.values()))
        kern = cfg.kernel
        kernels[id(lv)] = kern
        kw = dict(derivatives=lv.derivatives, min_cells=cfg.min_cells, min_steps=cfg.min_steps)
        xsums.append(WindowSums(grid, kern, lv.scale, **kw))
        zsums.append(WindowSums(grid, kern, lv.scale, **kw))
    proj = _probe_projector(grid, plan.probes)
    if plan.noise_probe is not None:
        p = np.asarray(plan.noise_probe(grid.x), dtype=np.float64)
        zx = np.empty(grid.nt)
        zz = np.empty(grid.nt)
    need_static = bool(plan.levels) or plan.noise_probe is not None
    static = seed.normal_blocks("static", grid.nt, grid.n_interior) if need_static else None
    for row0, rows in iter_trajectory(model.theta, model.sigma, grid, seed=seed, noise_multiplier=model.noise_multiplier):
        m = rows.shape[0]
        for ws in xsums:
            ws.add(row0, rows)
        if proj is not None:
            proj.add(row0, rows)
        if plan.noise_probe is not None:
            zx[row0 : row0 + m] = rows @ p
        if static is not None:
            r0, z = next(static)
            assert r0 == row0
            for ws in zsums:
                ws.add(row0, z)
            if plan.noise_probe is not None:
                zz[row0 : row0 + m] = z @ p
    out = {"seed": seed.seed, "trajectory": seed.trajectory, "levels": [], "probes": [], "noise": {}}
    for lv, xs, zs in zip(plan.levels, xsums, zsums):
        eta = static_noise_eta(lv.epsilon, grid)
        ys = xs.combined(zs, eta)
        res = {}
        for name, cfg in lv.configs.items():
            try:
                if plan.diagnostics:
                    rep = estimate_from_sums(ys, cfg, xsums=xs, theta_true=model.theta, sigma=model.sigma)
                else:
                    rep = estimate_from_sums(ys, cfg)
                d = None
                if name in lv.ci:
                    try:
                        confidence_interval(rep, 0.95, sigma=model.sigma, T=grid.T)
                    except ArithmeticError as exc:
                        d = f"{type(exc).__name__}: {exc}"
                res[name] = rep.to_dict()
                if d is not None:
                    res[name]["ci_error"] = d
            except (ValueError, ArithmeticError) as exc:
                res[name] = {"error": f"{type(exc).__name__}: {exc}"}
        out["levels"].append({"epsilon": lv.epsilon, "results": res})
    if proj is not None:
        for q, probe in enumerate(plan.probes):
            out["probes"].append(float(proj.acc[q] @ probe.space(grid.x)) * grid.dt * grid.dx)
    if plan.noise_probe is not None:
        norm2 = float(p @ p) * grid.dx
        scale = grid.dt * grid.dx
        for eps in plan.noise_levels:
            Z = (zx + static_noise_eta(eps, grid) * zz) * scale
            out["noise"][float(eps)] = noise_level_from_projection(Z, norm2, grid.T)
    return out


def resolve_threads(threads: Optional[int] = None) -> int:
    if threads is None:
        env = os.environ.get("HEATEST_THREADS")
        threads = int(env) if env else 1
    if threads < 1:
        raise ValueError("threads must be >= 1")
    return threads


def run_replications(
    model: Model,
    plan: Plan,
    n_reps: int,
    seed: int,
    threads: Optional[int] = None,
    first: int = 0,
    progress: Optional[Callable[[int, int], None]] = None,
) -> list:
    """Replications ``first .. first+n_reps-1`` with per-replication seed streams.

    Results come back ordered by replication index whatever the thread count.
    """
    threads = resolve_threads(threads)
    idx = list(range(first, first + n_reps))
    results = {}

    def job(r):
        return r, replicate(model, plan, SeedSpec(seed, r))

    if threads == 1:
        for r in idx:
            results[r] = job(r)[1]
            if progress:
                progress(len(results), n_reps)
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            for r, res in pool.map(job, idx):
                results[r] = res
                if progress:
                    progress(len(results), n_reps)
    return [results[r] for r in idx]


# ---------------------------------------------------------------------------
# rate studies


def fit_slope(x: Sequence[float], y: Sequence[float]) -> tuple[float, float]:
    """Least-squares slope of ``log y`` on ``log x`` and its standard error."""
    lx = np.log(np.asarray(x, dtype=np.float64))
    ly = np.log(np.asarray(y, dtype=np.float64))
    if lx.size < 2:
        return math.nan, math.nan
    A = np.vstack([lx, np.ones_like(lx)]).T
    coef, *_ = np.linalg.lstsq(A, ly, rcond=None)
    if lx.size < 3:
        return float(coef[0]), math.nan
    resid = ly - A @ coef
    s2 = float(resid @ resid) / (lx.size - 2)
    se = math.sqrt(s2 / float(np.sum((lx - lx.mean()) ** 2)))
    return float(coef[0]), se


@dataclass
class RateStudyResult:
    mode: str
    rows: list
    slope: float
    slope_se: float

    CSV_COLUMNS = ("epsilon", "delta", "replications", "failures", "mean", "stderr", "rmse", "ref_eps_3_4", "ref_eps_1_2")

    def to_csv(self) -> str:
        lines = [",".join(self.CSV_COLUMNS)]
        for r in self.rows:
            lines.append(",".join(repr(r[c]) if isinstance(r[c], float) else str(r[c]) for c in self.CSV_COLUMNS))
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return {"mode": self.mode, "rows": self.rows, "slope": self.slope, "slope_se": self.slope_se}


def rate_rows(results: list, level_eps: Sequence[float], name: str, truth: float) -> list:
    """Aggregate ``theta_hat`` of config ``name`` per level into RMSE rows."""
    rows = []
    for li, eps in enumerate(level_eps):
        vals = []
        fails = 0
        for res in results:
            rep = res["levels"][li]["results"][name]
            if "error" in rep:
                fails += 1
            else:
                vals.append(rep["theta_hat"])
        v = np.sort(np.asarray(vals))  # sorted reduction order
        n = v.size
        mean = float(np.mean(v)) if n else math.nan
        rmse = float(math.sqrt(np.mean((v - truth) ** 2))) if n else math.nan
        se = float(np.std(v, ddof=1) / math.sqrt(n)) if n > 1 else math.nan
        rows.append(
            {
                "epsilon": float(eps),
                "delta": math.sqrt(eps),
                "replications": n,
                "failures": fails,
                "mean": mean,
                "stderr": se,
                "rmse": rmse,
                "ref_eps_3_4": eps**0.75,
                "ref_eps_1_2": eps**0.5,
            }
        )
    return rows


def rate_plan(deltas: Sequence[float], x0: float = 0.5, derivatives: str = "grid", modes=("parametric", "lipschitz"), ci=True) -> Plan:
    levels = []
    for d in deltas:
        eps = d * d
        cfgs = {}
        if "parametric" in modes:
            cfgs["parametric"] = EstimatorConfig(eps=eps, x0=x0, h=1.0, derivatives=derivatives)
        if "lipschitz" in modes:
            cfgs["lipschitz"] = EstimatorConfig(eps=eps, x0=x0, h=math.sqrt(eps), derivatives=derivatives)
        levels.append(Level(eps, cfgs, ("parametric",) if ci and "parametric" in modes else ()))
    return Plan(levels=tuple(levels))


def rate_study(
    model: Model,
    deltas: Sequence[float],
    n_reps: int,
    seed: int,
    modes=("parametric", "lipschitz"),
    threads: Optional[int] = None,
    results: Optional[list] = None,
    x0: float = 0.5,
    progress=None,
) -> dict:
    """RMSE per noise level and fitted log-log slope for each bandwidth mode.

    Aborts with RuntimeError when more than 10% of the replications fail.
    """
    if results is None:
        results = run_replications(model, rate_plan(deltas, x0, modes=modes), n_reps, seed, threads, progress=progress)
    truth = float(model.theta(np.array([x0]))[0])
    eps = [d * d for d in deltas]
    out = {}
    for mode in modes:
        rows = rate_rows(results, eps, mode, truth)
        for r in rows:
            if r["failures"] > 0.1 * (r["failures"] + r["replications"]):
                raise RuntimeError(f"{mode}: {r['failures']} failed replications at epsilon={r['epsilon']}")
        slope, se = fit_slope([r["epsilon"] for r in rows], [r["rmse"] for r in rows]) if len(rows) > 1 and n_reps > 1 else (math.nan, math.nan)
        out[mode] = RateStudyResult(mode, rows, slope, se)
    return out


# ---------------------------------------------------------------------------
# spatial profiles


PROFILE_POINTS = tuple(round(0.05 * i, 2) for i in range(1, 20))


def profile_plan(
    deltas: Sequence[float],
    x0_list=PROFILE_POINTS,
    h_rule: str = "cube_root",
    derivatives: str = "grid",
    ci: bool = False,
) -> Plan:
    levels = []
    for d in deltas:
        eps = d * d
        h = eps ** (1 / 3) if h_rule == "cube_root" else "auto"
        cfgs = {f"x0={x:.2f}": EstimatorConfig(eps=eps, x0=x, h=h, derivatives=derivatives) for x in x0_list}
        levels.append(Level(eps, cfgs, tuple(cfgs) if ci else ()))
    return Plan(levels=tuple(levels), diagnostics=False)


def profile_study(
    model: Model,
    deltas: Sequence[float],
    n_reps: int,
    seed: int,
    x0_list=PROFILE_POINTS,
    threads=None,
    results=None,
    progress=None,
) -> dict:
    """Per level: rows ``(x0, mean theta_hat, n_shifts, truth)`` and the mean absolute error.

    When the replications carry intervals, ``ci_lo``/``ci_hi`` bound the
    replication mean: mean half-width over ``sqrt(n_ok)`` around the mean.
    """
    if results is None:
        results = run_replications(model, profile_plan(deltas, x0_list), n_reps, seed, threads, progress=progress)
    out = {}
    for li, d in enumerate(deltas):
        rows = []
        abs_err = []
        for x in x0_list:
            name = f"x0={x:.2f}"
            truth = float(model.theta(np.array([x]))[0])
            vals = []
            hws = []
            n_shifts = None
            for res in results:
                rep = res["levels"][li]["results"][name]
                if "error" in rep:
                    continue
                vals.append(rep["theta_hat"])
                n_shifts = rep["n_weighted"]  # shifts that enter the estimate
                if rep.get("ci"):
                    hws.append(0.5 * (rep["ci"]["upper"] - rep["ci"]["lower"]))
            v = np.asarray(vals)
            if v.size and len(hws) == v.size:
                hw = float(np.mean(hws)) / math.sqrt(v.size)
                ci_lo, ci_hi = float(np.mean(v)) - hw, float(np.mean(v)) + hw
            else:
                ci_lo = ci_hi = math.nan
            rows.append(
                {
                    "x0": x,
                    "theta_hat": float(np.mean(v)) if v.size else math.nan,
                    "sd": float(np.std(v, ddof=1)) if v.size > 1 else math.nan,
                    "n_shifts": n_shifts,
                    "n_ok": int(v.size),
                    "ci_lo": ci_lo,
                    "ci_hi": ci_hi,
                    "theta_true": truth,
                }
            )
            if v.size:
                abs_err.append(np.abs(v - truth))
        mae = float(np.mean(np.concatenate(abs_err))) if abs_err else math.nan
        out[d] = {"rows": rows, "mae": mae}
    return out


# ---------------------------------------------------------------------------
# oracle agreement


def covariance_check(model: Model, probes: Sequence[SeparableFunction], results: list, n_modes: int = 4096) -> list:
    """Sample variance of ``<X, phi>`` against the spectral covariance, per probe."""
    if not model.theta.is_constant:
        raise ValueError("the covariance oracle needs a constant diffusivity")
    theta0 = model.theta.params["value"]
    oracle = SpectralOracle(theta0, model.sigma, n_modes=n_modes)
    out = []
    for q, probe in enumerate(probes):
        v = np.asarray([res["probes"][q] for res in results])
        n = v.size
        # the solution starts at zero, so the mean is known
        var = float(np.mean(v * v))
        se = float(np.std(v * v, ddof=1) / math.sqrt(n))
        ref = spectral_covariance(probe, probe, oracle)
        out.append(
            {
                "probe": probe.label,
                "mc_variance": var,
                "mc_stderr": se,
                "oracle": ref,
                "z": (var - ref) / se,
                "ratio": var / ref,
                "pass": abs(var - ref) <= 3 * se,
            }
        )
    return out


def noise_level_check(results: list, epsilon: float) -> dict:
    vals = np.asarray([res["noise"][float(epsilon)] for res in results])
    ratio = float(np.mean(vals)) / epsilon
    return {"epsilon": epsilon, "runs": int(vals.size), "mean_ratio": ratio, "pass": 0.95 <= ratio <= 1.05}


# ---------------------------------------------------------------------------
# manifests


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int
    version: str = __version__
    started: str = ""
    finished: str = ""
    outputs: dict = field(default_factory=dict)

    def stamp_start(self):
        self.started = time.strftime("%Y-%m-%dT%H:%M:%S%z")

    def stamp_finish(self):
        self.finished = time.strftime("%Y-%m-%dT%H:%M:%S%z")

    def add_output(self, path) -> None:
        self.outputs[os.path.basename(str(path))] = file_digest(path)

    def write(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(asdict(self), fh, indent=2, sort_keys=True, default=str)
            fh.write("\n")


# ---------------------------------------------------------------------------
# oracle checks shared by the command line and the tests


def covariance_probes(delta: float = 0.05, k: Optional[int] = None) -> tuple:
    """Three test functions: a low sine mode, a localized kernel, a product probe."""
    from .kernels import bump_kernel, localize
    from .oracle import probe_from_localized

    K = bump_kernel()
    sine = SeparableFunction(
        lambda t: K.time(t, 0),
        lambda x: math.sqrt(2.0) * np.sin(math.pi * x),
        (0.0, 1.0),
        (0.0, 1.0),
        "sine mode 1",
    )
    eps = delta * delta
    if k is None:
        k = int(0.5 / eps)
    loc = probe_from_localized(localize(K, k, 0.0, eps, 0.5))
    loc = replace(loc, label=f"localized kernel delta={delta:g} k={k}")
    prod = SeparableFunction(
        lambda t: np.sin(math.pi * t) * ((t >= 0) & (t <= 1)),
        lambda x: x * x * (1.0 - x),
        (0.0, 1.0),
        (0.0, 1.0),
        "product sin(pi t) x^2 (1-x)",
    )
    return sine, loc, prod


def tk_constant_fit(deltas: Sequence[float], t: float = 1.0, theta: float = 1.0, x0: float = 0.5) -> dict:
    """Trotter-Kato errors for constant theta; linear fit of log error on delta^-2."""
    from .kernels import bump1d
    from .oracle import trotter_kato_error

    errs = [trotter_kato_error(bump1d, t, d, d, theta=theta, x0=x0) for d in deltas]
    x = np.asarray(deltas, dtype=np.float64) ** -2
    y = np.log(errs)
    A = np.vstack([x, np.ones_like(x)]).T
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - A @ coef
    r2 = 1.0 - float(resid @ resid) / float(np.sum((y - y.mean()) ** 2))
    return {"deltas": list(deltas), "errors": errs, "slope": float(coef[0]), "r2": r2, "pass": bool(r2 >= 0.95 and coef[0] < 0)}


def tk_hetero_fit(hs: Sequence[float], delta: float = 2.5e-4, x0: float = 0.35, t: float = 1.0, theta=None) -> dict:
    """Trotter-Kato errors for the two-plateau diffusivity; log-log slope in h."""
    from .kernels import bump1d
    from .oracle import trotter_kato_error

    theta = DiffusivityField.two_plateau() if theta is None else theta
    errs = [trotter_kato_error(bump1d, t, delta, h, theta=theta, x0=x0) for h in hs]
    slope, se = fit_slope(hs, errs)
    return {"h": list(hs), "errors": errs, "slope": slope, "slope_se": se, "pass": bool(0.7 <= slope <= 1.3)}


def c_infinity_convergence(theta: float = 0.02, sigma: float = 10.0) -> dict:
    """Relative change of both limiting constants when the FFT grid and the time grid double."""
    from .kernels import bump_kernel
    from .oracle import c_infinity, laplacian_of

    K = bump_kernel()
    out = {}
    for name, shift in (("same", 0.0), ("lag", -1.0)):
        a = c_infinity(laplacian_of(K, shift), laplacian_of(K), theta, sigma)
        b = c_infinity(laplacian_of(K, shift), laplacian_of(K), theta, sigma, n_fft=1 << 13, n_time=8001)
        out[name] = {"value": a, "refined": b, "rel_change": abs(b - a) / abs(a)}
    out["pass"] = all(v["rel_change"] < 1e-4 for v in out.values() if isinstance(v, dict))
    return out
