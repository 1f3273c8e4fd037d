"""Acceptance criteria 1-10, each reported as one pass/fail line.

The Monte Carlo criteria share two batches of replications: 200 paths with
constant diffusivity (rates, martingale diagnostics, coverage, covariance
oracle, noise level) and 20 paths with the two-plateau diffusivity (profile).
Together they take roughly half an hour on a single core.
"""

import json
import math
import time

import numpy as np
import pytest
from scipy import integrate

from heatest.estimator import (
    EstimatorConfig,
    build_shift_grid,
    build_weights,
    error_decomposition,
    estimate,
    estimate_from_sums,
)
from heatest.experiments import (
    Model,
    Plan,
    covariance_check,
    covariance_probes,
    noise_level_check,
    profile_plan,
    profile_study,
    rate_plan,
    rate_study,
    run_replications,
    tk_constant_fit,
    tk_hetero_fit,
)
from heatest.grid import DiffusivityField, SeedSpec, SpaceTimeGrid
from heatest.kernels import bump_kernel, localize
from heatest.riemann import WindowSums
from heatest.sim import add_static_noise, simulate

RATE_DELTAS = (0.05, 0.02, 0.01)
PROFILE_DELTAS = (0.04, 0.02, 0.01)
N_CONSTANT = 200
N_PROFILE = 20
NOISE_EPS = 0.01
SEED = 20240601

pytestmark = pytest.mark.slow


def _noise_probe(x):
    return math.sqrt(2.0) * np.sin(math.pi * x)


@pytest.fixture(scope="session")
def constant_batch(tmp_path_factory):
    model = Model(DiffusivityField.constant(0.02), sigma=10.0)
    rp = rate_plan(RATE_DELTAS, 0.5)
    probes = covariance_probes(0.05)
    plan = Plan(levels=rp.levels, probes=probes, noise_probe=_noise_probe, noise_levels=(NOISE_EPS,))
    t0 = time.perf_counter()
    results = run_replications(model, plan, N_CONSTANT, SEED)
    elapsed = time.perf_counter() - t0
    path = tmp_path_factory.mktemp("acceptance") / "constant_batch.json"
    path.write_text(json.dumps(results, default=str))
    print(f"constant batch: {N_CONSTANT} paths in {elapsed:.0f}s, results in {path}")
    return model, probes, results, elapsed


@pytest.fixture(scope="session")
def profile_batch():
    model = Model(DiffusivityField.two_plateau(), sigma=10.0)
    t0 = time.perf_counter()
    results = run_replications(model, profile_plan(PROFILE_DELTAS), N_PROFILE, SEED + 1)
    elapsed = time.perf_counter() - t0
    return model, profile_study(model, PROFILE_DELTAS, N_PROFILE, SEED + 1, results=results), elapsed


@pytest.fixture(scope="session")
def rates(constant_batch):
    model, _, results, _ = constant_batch
    return rate_study(model, RATE_DELTAS, N_CONSTANT, SEED, results=results)


def _level_reports(results, delta, name="parametric"):
    li = RATE_DELTAS.index(delta)
    reps = [r["levels"][li]["results"][name] for r in results]
    return [r for r in reps if "error" not in r]


def _rows_text(rows):
    return ", ".join(f"d={r['delta']:g} rmse={r['rmse']:.3g}" for r in rows)


def test_c01_parametric_rate(rates, constant_batch, criterion):
    r = rates["parametric"]
    ok = 0.6 <= r.slope <= 0.9 and all(row["replications"] >= 100 for row in r.rows)
    criterion(1, "parametric RMSE slope in [0.6, 0.9]", ok, f"slope={r.slope:.3f}+-{r.slope_se:.3f}; {_rows_text(r.rows)}; batch {constant_batch[3]:.0f}s")
    assert ok


def test_c02_lipschitz_rate(rates, criterion):
    r = rates["lipschitz"]
    ok = 0.35 <= r.slope <= 0.65 and all(row["replications"] >= 100 for row in r.rows)
    criterion(2, "Lipschitz RMSE slope in [0.35, 0.65]", ok, f"slope={r.slope:.3f}+-{r.slope_se:.3f}; {_rows_text(r.rows)}")
    assert ok


def test_c03_heterogeneous_profile(profile_batch, criterion):
    model, study, elapsed = profile_batch
    fine = {row["x0"]: row for row in study[0.01]["rows"]}
    t02, t08 = fine[0.2]["theta_hat"], fine[0.8]["theta_hat"]
    maes = [study[d]["mae"] for d in PROFILE_DELTAS]
    monotone = all(a > b for a, b in zip(maes, maes[1:]))
    ok = 0.028 <= t02 <= 0.052 and 0.014 <= t08 <= 0.026 and monotone
    detail = f"theta(0.2)={t02:.4f} theta(0.8)={t08:.4f}; MAE " + " > ".join(f"{m:.4f}" for m in maes)
    criterion(3, "two-plateau profile and monotone MAE", ok, detail + f"; {N_PROFILE} paths in {elapsed:.0f}s")
    assert ok


def test_c04_effective_sample_size(criterion):
    t0 = time.perf_counter()
    grid = SpaceTimeGrid(1.0, 250000, 512)
    refs = {0.05: 3600, 0.02: 57500, 0.01: 4.9e5, 0.005: 3.96e6}
    got = {}
    for d, ref in refs.items():
        sg = build_shift_grid(EstimatorConfig(eps=d * d, h=1.0), grid)
        got[d] = sg.N_eps * sg.n_shifts
    elapsed = time.perf_counter() - t0
    ok = all(abs(got[d] / refs[d] - 1) <= 0.02 for d in refs) and elapsed < 1.0
    criterion(4, "N_eps * |shifts| within 2%", ok, ", ".join(f"d={d:g}: {got[d]}" for d in refs) + f" ({elapsed * 1e3:.1f} ms)")
    assert ok


def test_c05_covariance_oracle(constant_batch, criterion):
    model, probes, results, _ = constant_batch
    rows = covariance_check(model, probes, results)
    ok = len(rows) == 3 and all(r["pass"] for r in rows)
    criterion(5, "Var<X, phi> within 3 MC stderr of the spectral value", ok, "; ".join(f"{r['probe']}: ratio={r['ratio']:.3f} z={r['z']:+.2f}" for r in rows))
    assert ok


def test_c06_martingale_diagnostics(constant_batch, criterion):
    results = constant_batch[2]
    reps = _level_reports(results, 0.02)
    M = np.array([r["M"] for r in reps])
    qv = np.array([r["qv_M"] for r in reps])
    B = np.array([r["B"] for r in reps])
    se = M.std(ddof=1) / math.sqrt(M.size)
    ratio = float(np.mean(M * M) / np.mean(qv))
    ok = M.size >= 200 and abs(M.mean()) <= 3 * se and 0.8 <= ratio <= 1.2 and np.all(B == 0)
    others = []
    for d in (0.05, 0.01):
        rr = _level_reports(results, d)
        m = np.array([r["M"] for r in rr])
        others.append(f"d={d:g}: {np.mean(m * m) / np.mean([r['qv_M'] for r in rr]):.3f}")
    criterion(6, "E M = 0 and E M^2 = E<M> at delta=0.02", ok, f"mean(M)/se={M.mean() / se:+.2f} ratio={ratio:.3f} (also {', '.join(others)})")
    assert ok


def test_c07_exact_invariants(criterion):
    K = bump_kernel()
    eps, x0 = 0.0016, 0.5
    # localization isometry: the localized kernel is separable, so its L2 norm
    # is the product of two 1D integrals in physical coordinates
    ref_t = integrate.quad(lambda s: K.time(s, 0) ** 2, 0, 1, epsabs=1e-13, epsrel=1e-13, limit=200)[0]
    ref_x = integrate.quad(lambda s: K.space(s, 0) ** 2, -1, 1, epsabs=1e-13, epsrel=1e-13, limit=200)[0]
    ref = math.sqrt(ref_t * ref_x)
    iso = 0.0
    for k, x in ((0, 0.0), (17, 4.0), (600, -10.0)):
        lk = localize(K, k, x, eps, x0)
        (ta, tb), (ya, yb) = lk.support
        nt = integrate.quad(lambda t: (lk.amplitude * K.time(lk.local_time(t), 0)) ** 2, ta, tb, epsabs=1e-13, epsrel=1e-13, limit=200)[0]
        nx = integrate.quad(lambda y: K.space(lk.local_space(y), 0) ** 2, ya, yb, epsabs=1e-13, epsrel=1e-13, limit=200)[0]
        iso = max(iso, abs(math.sqrt(nt * nx) - ref))
    # weight moments
    grid = SpaceTimeGrid(1.0, 20000, 256)
    moment = 0.0
    for scheme in ("uniform", "loclin"):
        for x0w, h in ((0.5, 1.0), (0.3, 0.5), (0.15, 0.3)):
            cfg = EstimatorConfig(eps=0.0025, x0=x0w, h=h, weight_scheme=scheme)
            wv = build_weights(scheme, build_shift_grid(cfg, grid), h)
            moment = max(moment, abs(wv.weights.sum() - 1), abs((wv.shifts * wv.weights).sum()))
    # estimator invariances and decomposition on a small noisy observation
    theta = DiffusivityField.two_plateau()
    traj = simulate(theta, 10.0, grid, seed=SeedSpec(3))
    obs = add_static_noise(traj, 0.002, SeedSpec(3))
    cfg = EstimatorConfig(eps=0.0025, x0=0.3, h=0.3, sigma=10.0)
    base = estimate(obs, cfg)
    ys = WindowSums.from_field(obs.values, grid, cfg.kernel, cfg.scale)
    scaled = WindowSums.from_field(-3.7 * obs.values, grid, cfg.kernel, cfg.scale)
    cy = abs(estimate_from_sums(scaled, cfg).theta_hat / base.theta_hat - 1)
    wv = build_weights("uniform", build_shift_grid(cfg, grid), cfg.bandwidth)
    cw = abs(estimate_from_sums(ys, cfg, weights=wv.scaled(-12.5)).theta_hat / base.theta_hat - 1)
    I, B, M, _ = error_decomposition(obs, cfg, theta)
    truth = float(theta(np.array([0.3]))[0])
    dec = abs((base.theta_hat - truth) - (M + B) / I) / abs(base.theta_hat - truth)
    const = DiffusivityField.constant(0.02)
    traj0 = simulate(const, 10.0, grid, seed=SeedSpec(4))
    _, B0, _, _ = error_decomposition(add_static_noise(traj0, 0.002, SeedSpec(4)), cfg, const)
    ok = iso <= 1e-8 and moment <= 1e-12 and cy <= 1e-12 and cw <= 1e-12 and dec <= 1e-10 and B0 == 0.0
    detail = f"isometry {iso:.1e}, moments {moment:.1e}, Y->cY {cy:.1e}, w->cw {cw:.1e}, decomposition {dec:.1e}, B(const)={B0}"
    criterion(7, "exact invariants", ok, detail)
    assert ok


def test_c08_trotter_kato(criterion):
    t0 = time.perf_counter()
    const = tk_constant_fit([0.1, 0.09, 0.08, 0.07, 0.06, 0.05])
    het = tk_hetero_fit([0.016, 0.008, 0.004, 0.002])
    elapsed = time.perf_counter() - t0
    ok = const["r2"] >= 0.95 and 0.7 <= het["slope"] <= 1.3 and elapsed <= 120
    criterion(8, "Trotter-Kato decay", ok, f"constant R^2={const['r2']:.5f}, two-plateau slope={het['slope']:.3f} ({elapsed:.0f}s)")
    assert ok


def test_c09_noise_level(constant_batch, criterion):
    res = noise_level_check(constant_batch[2], NOISE_EPS)
    ok = res["runs"] >= 50 and res["pass"]
    criterion(9, "mean eps_hat / eps in [0.95, 1.05]", ok, f"ratio={res['mean_ratio']:.4f} over {res['runs']} runs")
    assert ok


def test_c10_ci_coverage(constant_batch, criterion):
    reps = _level_reports(constant_batch[2], 0.02)
    cis = [r["ci"] for r in reps if r.get("ci")]
    cover = np.mean([c["lower"] <= 0.02 <= c["upper"] for c in cis])
    hw = np.mean([0.5 * (c["upper"] - c["lower"]) for c in cis])
    sd = np.std([r["theta_hat"] for r in reps], ddof=1)
    ok = len(cis) >= 200 and 0.90 <= cover <= 0.99
    criterion(10, "95% CI coverage in [0.90, 0.99] at delta=0.02", ok, f"coverage={cover:.3f} over {len(cis)}, mean half-width={hw:.2e} vs 1.96*sd={1.96 * sd:.2e}")
    assert ok


def test_parametric_mean_unbiased(constant_batch):
    reps = _level_reports(constant_batch[2], 0.02)
    v = np.array([r["theta_hat"] for r in reps])
    se = v.std(ddof=1) / math.sqrt(v.size)
    assert abs(v.mean() - 0.02) <= 3 * se
