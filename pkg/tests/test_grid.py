import hashlib
import math
import struct
from decimal import Decimal, getcontext

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from heatest.grid import (
    BinaryWriter,
    DiffusivityField,
    NOISE_BLOCK,
    SeedSpec,
    SpaceTimeGrid,
    open_binary,
    read_binary,
    sample_field,
    write_binary,
    write_csv,
)


def test_grid_steps_and_nodes():
    g = SpaceTimeGrid(1.0, 250, 8)
    assert g.dt == 1.0 / 250 and g.dx == 1.0 / 8
    assert g.shape == (250, 7)
    assert np.allclose(g.x, np.arange(1, 8) / 8, rtol=0, atol=0)
    assert g.t[0] == 0.0 and g.t[-1] == pytest.approx(1 - g.dt)


@given(st.integers(3, 5000))
def test_node_spacing_within_one_rounding(nx):
    x = SpaceTimeGrid(1.0, 10, nx).x
    assert np.all(np.abs(np.diff(x) - 1.0 / nx) <= 2 * np.spacing(1.0))


def test_grid_rejects_bad_sizes():
    with pytest.raises(ValueError):
        SpaceTimeGrid(0.0, 10, 10)
    with pytest.raises(ValueError):
        SpaceTimeGrid(1.0, 0, 10)
    with pytest.raises(ValueError):
        SpaceTimeGrid.from_steps(1.0, 0.3, 0.1)


def test_from_steps():
    g = SpaceTimeGrid.from_steps(1.0, 4e-6, 1 / 512)
    assert (g.nt, g.nx) == (250000, 512)


def test_sample_field_zero_and_sine():
    g = SpaceTimeGrid(1.0, 4, 4)
    assert np.all(sample_field(lambda x: 0.0 * x, g).values == 0)
    v = sample_field(lambda x: np.sin(np.pi * x), g).values
    assert np.allclose(v, [math.sin(math.pi / 4), 1.0, math.sin(3 * math.pi / 4)], rtol=0, atol=1e-15)


def test_sample_field_rejects_non_finite():
    g = SpaceTimeGrid(1.0, 4, 4)
    with pytest.raises(ValueError, match="non-finite"), np.errstate(divide="ignore"):
        sample_field(lambda x: 1.0 / (x - 0.5), g)


def test_field_values_are_read_only():
    v = sample_field(np.sin, SpaceTimeGrid(1.0, 2, 8)).values
    with pytest.raises(ValueError):
        v[0] = 1.0


def test_two_plateau_at_half_against_decimal():
    getcontext().prec = 40
    psi = lambda y: 1 / (1 + Decimal(50 * y).exp())
    ref = Decimal("0.04") * psi(Decimal("0.1")) + Decimal("0.02") * psi(Decimal("-0.1") * -1)
    # psi(0.5 - 0.4) and psi(0.6 - 0.5) coincide
    th = DiffusivityField.two_plateau()
    assert th(np.array([0.5]))[0] == pytest.approx(float(ref), rel=1e-13)


def test_two_plateau_levels_and_bounds():
    th = DiffusivityField.two_plateau()
    x = np.linspace(0, 1, 1001)
    v = th(x)
    assert np.all((v >= th.theta_min) & (v <= th.theta_max))
    assert th.theta_min > 0
    assert th(np.array([0.1]))[0] == pytest.approx(0.04, rel=1e-6)
    assert th(np.array([0.9]))[0] == pytest.approx(0.02, rel=1e-6)


def test_two_plateau_derivative_matches_difference():
    th = DiffusivityField.two_plateau()
    x = np.linspace(0.05, 0.95, 37)
    h = 1e-6
    fd = (th(x + h) - th(x - h)) / (2 * h)
    assert np.allclose(th.grad(x), fd, rtol=1e-6, atol=1e-8)


@given(st.floats(1e-4, 10.0))
def test_constant_field(c):
    th = DiffusivityField.constant(c)
    assert th.is_constant
    assert np.all(th(np.linspace(0, 1, 11)) == c)
    assert np.all(th.grad(np.linspace(0, 1, 11)) == 0)


def test_from_spec():
    assert DiffusivityField.from_spec({"kind": "constant", "params": {"value": 0.3}}).params["value"] == 0.3
    assert DiffusivityField.from_spec({"kind": "two_plateau"}).kind == "two_plateau"
    with pytest.raises(ValueError):
        DiffusivityField.from_spec({"kind": "wavy"})


def _digest(spec, purpose, n_rows, n_cols, start=0):
    h = hashlib.sha256()
    for _, blk in spec.normal_blocks(purpose, n_rows, n_cols, start):
        h.update(blk.tobytes())
    return h.hexdigest()


def test_seed_determinism_by_hash():
    a = _digest(SeedSpec(7, 3), "dynamic", 2500, 5)
    b = _digest(SeedSpec(7, 3), "dynamic", 2500, 5)
    assert a == b
    assert a != _digest(SeedSpec(7, 4), "dynamic", 2500, 5)
    assert a != _digest(SeedSpec(7, 3), "static", 2500, 5)
    assert a != _digest(SeedSpec(8, 3), "dynamic", 2500, 5)


def test_blocks_can_be_regenerated_alone():
    spec = SeedSpec(11, 2)
    full = [blk.copy() for _, blk in spec.normal_blocks("static", 3 * NOISE_BLOCK, 3)]
    tail = [blk.copy() for _, blk in spec.normal_blocks("static", 3 * NOISE_BLOCK, 3, start=2 * NOISE_BLOCK)]
    assert np.array_equal(full[2], tail[0])
    with pytest.raises(ValueError):
        next(spec.normal_blocks("static", 10, 3, start=5))


def test_seed_range():
    SeedSpec(2**64 - 1)
    with pytest.raises(ValueError):
        SeedSpec(2**64)
    with pytest.raises(ValueError):
        SeedSpec(-1)


def test_binary_layout_and_roundtrip(tmp_path):
    g = SpaceTimeGrid(0.5, 3, 4)
    v = np.arange(9, dtype=float).reshape(3, 3) / 7
    p = tmp_path / "f.hest"
    write_binary(p, v, g)
    raw = p.read_bytes()
    assert raw[:5] == b"HEST1"
    assert struct.unpack("<QQd", raw[5:29]) == (3, 4, 0.5)
    assert np.frombuffer(raw[29:], "<f8").tolist() == v.ravel().tolist()
    g2, v2 = read_binary(p)
    assert g2 == g and np.array_equal(v2, v)
    g3, v3 = open_binary(p)
    assert g3 == g and np.array_equal(np.asarray(v3), v)


def test_streamed_writer_matches_one_shot(tmp_path):
    g = SpaceTimeGrid(1.0, 5, 6)
    v = np.random.default_rng(0).normal(size=(5, 5))
    write_binary(tmp_path / "a", v, g)
    with BinaryWriter(tmp_path / "b", g) as w:
        w.write(v[:2])
        w.write(v[2:])
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


def test_binary_rejects_garbage(tmp_path):
    p = tmp_path / "bad"
    p.write_bytes(b"NOPE!" + bytes(40))
    with pytest.raises(ValueError):
        read_binary(p)
    with pytest.raises(ValueError):
        open_binary(p)


def test_csv_export(tmp_path):
    g = SpaceTimeGrid(1.0, 2, 3)
    p = tmp_path / "f.csv"
    write_csv(p, np.array([[1.0, 2.0], [3.0, 4.0]]), g)
    lines = p.read_text().splitlines()
    assert lines[0] == "t,x,value"
    assert len(lines) == 5
    assert lines[-1].split(",") == ["0.5", repr(2 / 3), "4.0"]
