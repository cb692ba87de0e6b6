import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from muskatflow.fields import (FieldError, Grid, PhasePair, dump_raw, gradient_central, integrate,
                               load_raw, tv_perimeter, upwind_gradient)

from conftest import square


def test_grid_geometry():
    g = Grid(64)
    assert g.h * g.nx == 1.0
    assert g.centers[0] == pytest.approx(0.5 / 64)
    X, Y = g.xy
    assert X[3, 0] == pytest.approx(3.5 / 64) and Y[0, 5] == pytest.approx(5.5 / 64)
    with pytest.raises(FieldError):
        Grid(3)
    with pytest.raises(FieldError):
        Grid(8, 16)


def test_integrate_examples(rng):
    g = Grid(64)
    assert integrate(np.ones(g.shape), g) == pytest.approx(1.0, abs=1e-14)
    X, _ = g.xy
    assert integrate((X < 0.5).astype(float), g) == pytest.approx(0.5, abs=1e-14)
    f = rng.normal(size=g.shape)
    naive = 0.0
    for i in range(g.nx):
        for j in range(g.ny):
            naive += f[i, j]
    assert integrate(f, g) == pytest.approx(naive * g.h**2, abs=1e-12)


def test_gradients():
    g = Grid(32)
    X, Y = g.xy
    d = gradient_central(X.copy(), g)
    assert np.allclose(d[0], 1.0, atol=1e-12) and np.allclose(d[1], 0.0, atol=1e-12)
    assert np.allclose(gradient_central(np.full(g.shape, 3.0), g), 0.0)
    lin = 2 * X - 3 * Y
    d = gradient_central(lin, g)
    assert np.allclose(d[0][1:-1, 1:-1], 2.0, atol=1e-12)
    assert np.allclose(d[1][1:-1, 1:-1], -3.0, atol=1e-12)

    errs = []
    for n in (64, 128):
        g = Grid(n)
        X, _ = g.xy
        d = gradient_central(X**2, g)
        errs.append(np.abs(d[0][1:-1] - 2 * X[1:-1]).max())
    # exact for quadratics in the interior
    assert max(errs) < 1e-10


def test_upwind_picks_side():
    g = Grid(8)
    f = np.zeros(g.shape)
    f[4, :] = 1.0
    v = np.zeros((2,) + g.shape)
    v[0] = 1.0
    d = upwind_gradient(f, v, g)
    # backward difference at i=4, zero at i=5 from behind
    assert d[0][4, 0] == pytest.approx(1 / g.h)
    assert d[0][5, 0] == pytest.approx(-1 / g.h)
    v[0] = -1.0
    d = upwind_gradient(f, v, g)
    assert d[0][3, 0] == pytest.approx(1 / g.h)
    assert d[0][4, 0] == pytest.approx(-1 / g.h)


def test_tv_perimeter_examples():
    g = Grid(64)
    X, _ = g.xy
    assert tv_perimeter((X < 0.5).astype(float), g) == pytest.approx(1.0, abs=g.h)
    assert tv_perimeter(np.zeros(g.shape), g) == 0.0
    assert tv_perimeter(square(g, (0.5, 0.5), 0.25), g) == pytest.approx(1.0, abs=4 * g.h)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(4, 24), st.integers(1, 3))
def test_tv_rotation_invariant(seed, n, k):
    rho = (np.random.default_rng(seed).random((n, n)) < 0.5).astype(float)
    g = Grid(n)
    assert abs(tv_perimeter(np.rot90(rho, k), g) - tv_perimeter(rho, g)) < 1e-12


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(4, 32))
def test_pair_masses_sum_to_one(seed, n):
    g = Grid(n)
    rho = np.random.default_rng(seed).random(g.shape)
    pair = PhasePair.from_phase1(g, rho)
    m1, m2 = pair.masses()
    assert abs(m1 + m2 - 1.0) < 1e-12
    sw = pair.swapped()
    assert sw.masses() == pytest.approx((m2, m1), abs=1e-14)


def test_pair_validation():
    g = Grid(8)
    with pytest.raises(FieldError):
        PhasePair(g, np.full(g.shape, 0.5), np.full(g.shape, 0.6))
    with pytest.raises(FieldError):
        PhasePair.from_phase1(g, np.full(g.shape, 1.5))
    with pytest.raises(FieldError):
        PhasePair.from_phase1(g, np.zeros(g.shape), b1=0.0)
    bad = np.zeros(g.shape)
    bad[0, 0] = np.nan
    with pytest.raises(FieldError):
        PhasePair.from_phase1(g, bad)
    pair = PhasePair.from_phase1(g, square(g, (0.5, 0.5), 0.5))
    assert pair.characteristic
    assert not PhasePair.from_phase1(g, np.full(g.shape, 0.5)).characteristic


def test_raw_roundtrip(tmp_path, rng):
    f = rng.normal(size=(8, 8))
    dump_raw(f, tmp_path / "f.raw")
    data = (tmp_path / "f.raw").read_bytes()
    assert len(data) == 8 + 64 * 8
    assert np.array_equal(load_raw(tmp_path / "f.raw"), f)
