import json
import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from heatest.estimator import (
    BandwidthTooSmall,
    CLTInapplicable,
    DegenerateInformation,
    DiagnosticsUnavailable,
    DomainTooSmall,
    EstimateReport,
    EstimatorConfig,
    WeightInfeasible,
    build_shift_grid,
    build_weights,
    confidence_interval,
    error_decomposition,
    estimate,
    estimate_noise_level,
    estimate_profile,
)
from heatest.grid import DiffusivityField, SeedSpec, SpaceTimeGrid
from heatest.sim import Observation, add_static_noise, simulate

DESK = SpaceTimeGrid(1.0, 250000, 512)
SMALL = SpaceTimeGrid(1.0, 20000, 256)


def _sg(delta, x0=0.5, h=1.0, grid=DESK):
    return build_shift_grid(EstimatorConfig(eps=delta * delta, x0=x0, h=h), grid)


def test_shift_grid_example():
    sg = _sg(0.05)
    assert sg.shifts.tolist() == [2.0 * k for k in range(-4, 5)]
    assert sg.N_eps == 399 and sg.n_eff == 3591


def test_shift_grid_supports_disjoint_and_inside():
    for delta, x0 in ((0.02, 0.5), (0.01, 0.13), (0.03, 0.91)):
        sg = _sg(delta, x0, h=1.0)
        assert np.all(np.diff(sg.shifts) == 2)
        lo = x0 + delta * (sg.shifts - 1)
        hi = x0 + delta * (sg.shifts + 1)
        assert lo.min() >= 0.1 * delta - 1e-12 and hi.max() <= 1 - 0.1 * delta + 1e-12


def test_domain_too_small():
    with pytest.raises(DomainTooSmall):
        _sg(0.5)


def test_large_effective_sample_size():
    assert _sg(0.005).n_eff == pytest.approx(3.96e6, rel=0.02)


def test_uniform_weights_full_window():
    sg = _sg(0.05)
    wv = build_weights("uniform", sg, 1.0)
    assert np.all(wv.weights == 1 / 9)
    assert math.fsum(wv.shifts * wv.weights) == 0.0


def test_uniform_weights_cube_root_bandwidth():
    eps = 0.02**2
    h = eps ** (1 / 3)
    wv = build_weights("uniform", _sg(0.02, h=h), h)
    assert np.all(np.abs(wv.shifts) < h / 0.02 / 2)
    assert abs(wv.weights.sum() - 1) <= 1e-15


def test_loclin_asymmetric_window():
    sg = _sg(0.02, x0=0.1, h=0.5)
    wv = build_weights("loclin", sg, 0.5)
    assert wv.shifts.min() < 0 < wv.shifts.max() and not np.isin(-wv.shifts, wv.shifts).all()
    assert abs(wv.weights.sum() - 1) <= 1e-12
    assert abs(np.sum(wv.shifts * wv.weights)) <= 1e-12
    # least norm among weights with the same moments: orthogonal to the null space
    A = np.vstack([np.ones_like(wv.shifts), wv.shifts])
    proj = A.T @ np.linalg.solve(A @ A.T, A @ wv.weights)
    assert np.allclose(proj, wv.weights, atol=1e-14)


def test_weight_errors():
    sg = _sg(0.05)
    with pytest.raises(BandwidthTooSmall):
        build_weights("uniform", replace(sg, shifts=np.array([2.0, 4.0])), 0.1)
    one_sided = replace(sg, shifts=np.array([2.0, 4.0, 6.0]))
    with pytest.raises(WeightInfeasible):
        build_weights("loclin", one_sided, 1.0)
    with pytest.raises(WeightInfeasible):
        build_weights("uniform", one_sided, 1.0)


@given(st.sampled_from(["uniform", "loclin"]), st.floats(0.05, 0.95), st.floats(0.1, 1.0), st.sampled_from([0.05, 0.02, 0.01]))
@settings(max_examples=60, deadline=None)
def test_weight_moments_property(scheme, x0, h, delta):
    try:
        sg = _sg(delta, x0, h=max(h, delta))
        wv = build_weights(scheme, sg, max(h, delta))
    except (DomainTooSmall, BandwidthTooSmall, WeightInfeasible):
        return
    assert abs(wv.weights.sum() - 1) <= 1e-12
    assert abs(np.sum(wv.shifts * wv.weights)) <= 1e-12
    assert np.all(np.abs(wv.shifts) < max(h, delta) / delta / 2)


def test_config_validation():
    with pytest.raises(ValueError):
        EstimatorConfig(eps=0.01, h=0.05)  # below delta
    with pytest.raises(ValueError):
        EstimatorConfig(eps=0.01, x0=1.2)
    with pytest.raises(ValueError):
        EstimatorConfig(eps=0.01, gamma=0.5)
    assert EstimatorConfig(eps=0.001).bandwidth == pytest.approx(0.001**0.5)
    assert EstimatorConfig(eps=0.001, gamma=2).bandwidth == pytest.approx(0.001**0.3)


@pytest.fixture(scope="module")
def hetero():
    theta = DiffusivityField.two_plateau()
    traj = simulate(theta, 10.0, SMALL, seed=SeedSpec(3))
    return theta, traj, add_static_noise(traj, 0.002, SeedSpec(3))


def test_scale_and_weight_invariance(hetero):
    _, _, obs = hetero
    cfg = EstimatorConfig(eps=0.0025, x0=0.3, h=0.3)
    base = estimate(obs, cfg).theta_hat
    for c in (-2.0, 1e-3, 1e4):
        scaled = Observation(obs.grid, c * obs.values, obs.epsilon, obs.eta)
        assert estimate(scaled, cfg).theta_hat == pytest.approx(base, rel=1e-12)


def test_decomposition_identity(hetero):
    theta, _, obs = hetero
    for x0 in (0.3, 0.5, 0.7):
        cfg = EstimatorConfig(eps=0.0025, x0=x0, h=0.3)
        I, B, M, qv = error_decomposition(obs, cfg, theta)
        err = estimate(obs, cfg).theta_hat - theta(np.array([x0]))[0]
        assert abs(err - (M + B) / I) <= 1e-10 * abs(err)
        assert qv > 0


@pytest.mark.parametrize("mode", ["grid", "analytic"])
def test_bias_vanishes_for_constant_theta(mode):
    const = DiffusivityField.constant(0.02)
    traj = simulate(const, 10.0, SMALL, seed=SeedSpec(4))
    _, B, _, _ = error_decomposition(add_static_noise(traj, 0.002, SeedSpec(4)), EstimatorConfig(eps=0.0025, derivatives=mode), const)
    assert B == 0.0


def test_noise_free_error_is_pure_bias():
    # without noise the grid-mode statistics are exact adjoints of the scheme,
    # so the martingale part vanishes and the whole error is B / I
    theta = DiffusivityField.two_plateau()
    init = np.sin(np.pi * SMALL.x) + 0.5 * np.sin(3 * np.pi * SMALL.x)
    traj = simulate(theta, 0.0, SMALL, x0_init=init)
    obs = add_static_noise(traj, 0.0, SeedSpec(0))
    for x0 in (0.3, 0.5):
        I, B, M, _ = error_decomposition(obs, EstimatorConfig(eps=0.0025, x0=x0, h=0.2, sigma=0.0 or 1.0), theta)
        assert abs(M / I) <= 1e-11
        assert abs(B / I) > 1e-6


def test_diagnostics_need_trajectory(hetero):
    theta, _, obs = hetero
    bare = Observation(obs.grid, obs.values, obs.epsilon, obs.eta)
    with pytest.raises(DiagnosticsUnavailable):
        error_decomposition(bare, EstimatorConfig(eps=0.0025), theta)


def test_degenerate_information():
    obs = Observation(SMALL, np.zeros(SMALL.shape), 0.0, 0.0)
    with pytest.raises(DegenerateInformation):
        estimate(obs, EstimatorConfig(eps=0.0025))


def test_variant_consistency():
    sigma, eps = 4.0, 0.01
    theta = DiffusivityField.constant(0.05)
    a = add_static_noise(simulate(theta, sigma, SMALL, seed=SeedSpec(8)), eps, SeedSpec(8))
    b = add_static_noise(simulate(theta, 1.0, SMALL, seed=SeedSpec(8)), eps / sigma, SeedSpec(8))
    ra = estimate(a, EstimatorConfig(eps=eps, h=0.5, delta_variant="sqrt_eps_over_sigma", sigma=sigma))
    rb = estimate(b, EstimatorConfig(eps=eps / sigma, h=0.5))
    assert ra.delta == rb.delta
    assert ra.theta_hat == pytest.approx(rb.theta_hat, rel=1e-10)


def test_noise_level_zero_and_linear():
    theta = DiffusivityField.constant(0.02)
    quiet = add_static_noise(simulate(theta, 0.0, SMALL), 0.0, SeedSpec(0))
    probe = lambda x: np.sin(np.pi * x)
    assert estimate_noise_level(quiet, probe) == 0.0
    traj = simulate(theta, 0.0, SMALL, x0_init=np.sin(np.pi * SMALL.x))
    e1 = estimate_noise_level(add_static_noise(traj, 0.01, SeedSpec(6)), probe)
    e2 = estimate_noise_level(add_static_noise(traj, 0.02, SeedSpec(6)), probe)
    assert e1 == pytest.approx(0.01, rel=0.03)
    assert e2 / e1 == pytest.approx(2.0, rel=1e-3)
    with pytest.raises(ValueError):
        estimate_noise_level(quiet, lambda x: 0 * x)


def _report(delta, theta_hat=0.02):
    sg = _sg(delta)
    cfg = EstimatorConfig(eps=delta * delta, h=1.0, sigma=10.0)
    return EstimateReport(theta_hat, 1.0, theta_hat, 0.5, cfg.eps, delta, 1.0, sg.N_eps, sg.n_shifts, sg.n_shifts, config=cfg.to_dict())


def test_confidence_interval_scaling():
    r1, r2 = _report(0.02), _report(0.01)
    lo1, hi1, _ = confidence_interval(r1, 0.95)
    lo2, hi2, _ = confidence_interval(r2, 0.95)
    assert (lo1 + hi1) / 2 == pytest.approx(0.02)
    assert (hi2 - lo2) / (hi1 - lo1) == pytest.approx((r2.eps / r1.eps) ** 0.75, rel=0.05)
    lo90, hi90, _ = confidence_interval(_report(0.02), 0.90)
    assert (hi90 - lo90) / (hi1 - lo1) == pytest.approx(1.6448536269514722 / 1.959963984540054, rel=1e-12)


def test_confidence_interval_errors():
    with pytest.raises(CLTInapplicable):
        confidence_interval(_report(0.02, theta_hat=-0.01))
    with pytest.raises(CLTInapplicable):
        confidence_interval(_report(0.02), c_inf_auto={"same": 1.0, "lag": 0.0})
    with pytest.raises(ValueError):
        confidence_interval(_report(0.02), level=1.5)


def test_report_json_has_all_fields(hetero):
    _, _, obs = hetero
    rep = estimate(obs, EstimatorConfig(eps=0.0025, h=0.3))
    d = json.loads(rep.to_json())
    for key in ("theta_hat", "I", "B", "M", "qv_M", "sigma_K_sq", "ci", "config", "N_eps", "n_shifts", "x0", "eps", "h"):
        assert key in d
    assert d["config"]["weight_scheme"] == "uniform"


def test_profile_boundary_and_errors(hetero):
    _, _, obs = hetero
    out = estimate_profile(obs, [0.05, 0.5, 0.99], EstimatorConfig(eps=0.0004, h=0.3))
    assert isinstance(out[0], EstimateReport) and isinstance(out[1], EstimateReport)
    assert out[0].n_weighted < out[1].n_weighted
    assert isinstance(out[2], Exception)
