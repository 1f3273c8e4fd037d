import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from heatest.grid import SpaceTimeGrid
from heatest.kernels import bump_kernel, localize, riemann_pair
from heatest.riemann import RowProjector, WindowSums, n_windows, spatial_profiles
from heatest.sim import Observation

K = bump_kernel()


def test_n_windows_absorbs_rounding():
    assert n_windows(1.0, 0.05**2) == 399
    assert n_windows(1.0, 0.02**2) == 2499
    assert n_windows(1.0, 0.01**2) == 9999
    assert n_windows(2.0, 0.5) == 3


@given(st.integers(1, 40), st.integers(1, 5), st.integers(1, 6))
@settings(max_examples=30, deadline=None)
def test_dense_projector_matches_product(nt, q, n):
    rng = np.random.default_rng(nt * 100 + q)
    W = rng.normal(size=(nt, q))
    rows = rng.normal(size=(nt, n))
    p = RowProjector.dense(W, n)
    cut = nt // 2
    p.add(0, rows[:cut])
    p.add(cut, rows[cut:])
    assert np.allclose(p.acc, W.T @ rows, rtol=1e-12, atol=1e-12)
    with pytest.raises(ValueError):
        p.add(nt, rows[:1])


@pytest.fixture(scope="module")
def field():
    g = SpaceTimeGrid(1.0, 4000, 128)
    rng = np.random.default_rng(3)
    return g, rng.normal(size=g.shape)


@pytest.mark.parametrize("mode", ["grid", "analytic"])
def test_window_sums_match_direct_sums(field, mode):
    g, Y = field
    eps = 0.05**2
    ws = WindowSums.from_field(Y, g, K, eps, derivatives=mode)
    shifts = np.array([-4.0, 0.0, 2.0])
    xp, xd = ws.statistics(spatial_profiles(g, K, eps, 0.5, shifts, mode))
    obs = Observation(g, Y, 0.0, 0.0)
    for k in (0, 57, ws.N):
        for i, x in enumerate(shifts):
            rp, rd = riemann_pair(obs, localize(K, k, x, eps, 0.5), derivatives=mode)
            assert xp[k, i] == pytest.approx(rp, rel=1e-10, abs=1e-12)
            assert xd[k, i] == pytest.approx(rd, rel=1e-10, abs=1e-12)


def test_streaming_in_blocks(field):
    g, Y = field
    eps = 0.0025
    one = WindowSums.from_field(Y, g, K, eps)
    parts = WindowSums(g, K, eps)
    for r0 in range(0, g.nt, 1000):
        parts.add(r0, Y[r0 : r0 + 1000])
    assert parts.complete and not WindowSums(g, K, eps).complete
    assert np.allclose(one.value, parts.value, rtol=1e-13, atol=1e-13)
    assert np.allclose(one.deriv, parts.deriv, rtol=1e-13, atol=1e-13)


def test_combined_is_sum_of_fields(field):
    g, Y = field
    Z = np.cos(Y)
    eps = 0.0025
    a = WindowSums.from_field(Y, g, K, eps)
    b = WindowSums.from_field(Z, g, K, eps)
    c = WindowSums.from_field(Y + 2.5 * Z, g, K, eps)
    ab = a.combined(b, 2.5)
    assert np.allclose(ab.value, c.value, rtol=1e-11, atol=1e-9)
    assert np.allclose(ab.deriv, c.deriv, rtol=1e-11, atol=1e-6)
    assert not np.shares_memory(ab.value, a.value)


def test_unknown_mode(field):
    g, _ = field
    with pytest.raises(ValueError):
        WindowSums(g, K, 0.0025, derivatives="spectral")
    with pytest.raises(ValueError):
        spatial_profiles(g, K, 0.0025, 0.5, [0.0], "spectral")
