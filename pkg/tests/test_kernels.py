import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from muskatflow.fields import FieldError, Grid, PhasePair
from muskatflow.kernels import (HeatKernel, flat_interface_value, gaussian_blur,
                                gaussian_blur_padded, hc_first_variation, heat_content,
                                heat_content_arrays)

from conftest import disc, random_pair


def test_kernel_params():
    g = Grid(64)
    k = HeatKernel.default(g, 0.15)
    assert k.eps == pytest.approx(16 * g.h**2)
    assert k.r_cut * g.h >= 13 * math.sqrt(k.eps)
    assert k.stencil.sum() == pytest.approx(1.0, abs=1e-15)
    with pytest.raises(FieldError):
        HeatKernel(g, 0.5 * g.h**2, 0.15)
    with pytest.raises(FieldError):
        HeatKernel(g, 1e-3, -1.0)


def test_blur_of_constant_leaks_at_walls():
    g = Grid(64)
    k = HeatKernel(g, g.h**2, 0.15)
    b = gaussian_blur(np.ones(g.shape), k)
    r = k.r_cut
    assert b[r:-r, r:-r].min() >= 1 - 1e-12
    assert b[0, :].max() < 1 and b[:, -1].max() < 1


def test_blur_delta_symmetric_and_mass():
    g = Grid(33)
    k = HeatKernel(g, 4 * g.h**2, 0.15)
    f = np.zeros(g.shape)
    f[16, 16] = 1.0
    b = gaussian_blur(f, k)
    assert np.abs(b - b.T).max() < 1e-12
    rng = np.random.default_rng(0)
    f = rng.random(g.shape)
    padded = gaussian_blur_padded(f, k)
    assert padded.sum() == pytest.approx(f.sum(), abs=1e-10)
    # dense oracle for the padded convolution
    n, r = g.nx, k.r_cut
    dense = np.zeros((n + 2 * r, n + 2 * r))
    w = k.stencil
    for i in range(n):
        for j in range(n):
            dense[i:i + 2 * r + 1, j:j + 2 * r + 1] += f[i, j] * np.outer(w, w)
    assert np.abs(dense - padded).max() < 1e-12
    # the in-domain blur is the interior window of the padded plane
    assert np.abs(padded[r:-r, r:-r] - gaussian_blur(f, k)).max() < 1e-12


def test_hc_separated_and_symmetric(rng):
    g = Grid(64)
    k = HeatKernel.default(g, 0.15)
    X, Y = g.xy
    r1 = ((X < 0.15) & (Y < 0.15)).astype(float)
    r2 = ((X > 0.85) & (Y > 0.85)).astype(float)
    assert heat_content_arrays(r1, r2, k) < 1e-10
    pair = random_pair(g, rng)
    assert heat_content(pair, k) == pytest.approx(heat_content(pair.swapped(), k), abs=1e-10)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([8, 16, 24]), st.floats(1.0, 20.0))
def test_hc_symmetry_property(seed, n, e):
    g = Grid(n)
    k = HeatKernel(g, e * g.h**2, 0.15)
    r1 = np.random.default_rng(seed).random(g.shape)
    assert abs(heat_content_arrays(r1, 1 - r1, k) - heat_content_arrays(1 - r1, r1, k)) < 1e-10


def test_flat_interface_value_constant():
    assert flat_interface_value(0.15) == pytest.approx(0.2121, abs=1e-4)


def test_flat_interface_with_wall_correction():
    # a vertical cut of unit length loses ~2 sqrt(eps/pi) of its length to the two walls
    g = Grid(256)
    k = HeatKernel.default(g, 0.15)
    X, _ = g.xy
    pair = PhasePair.from_phase1(g, (X < 0.5).astype(float))
    hc = heat_content(pair, k)
    predicted = flat_interface_value(0.15) * (1 - 2 * math.sqrt(k.eps / math.pi))
    # the remaining ~0.25% is the quadrature of the cross-interface profile at eps = 16 h^2
    assert hc == pytest.approx(predicted, rel=5e-3)


def test_first_variation_examples(rng):
    g = Grid(16)
    k = HeatKernel.default(g, 0.15)
    assert np.all(hc_first_variation(np.zeros(g.shape), k) == 0)
    r1 = rng.random(g.shape)
    r2 = rng.random(g.shape)
    delta = rng.normal(size=g.shape)
    t = 1e-6
    fd = (heat_content_arrays(r1 + t * delta, r2, k) - heat_content_arrays(r1, r2, k)) / t
    exact = float(np.sum(hc_first_variation(r2, k) * delta)) * g.h**2
    assert fd == pytest.approx(exact, rel=1e-6)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_linearisation_upper_bound(seed):
    rng = np.random.default_rng(seed)
    g = Grid(16)
    k = HeatKernel.default(g, 0.15)
    a = rng.random(g.shape)
    b = rng.random(g.shape)
    # d/d rho1 along the constraint rho2 = 1 - rho1
    hc_a = heat_content_arrays(a, 1 - a, k)
    grad = hc_first_variation(1 - a, k) - hc_first_variation(a, k)
    lin = hc_a + float(np.sum(grad * (b - a))) * g.h**2
    assert heat_content_arrays(b, 1 - b, k) <= lin + 1e-10


def test_resolution_refinement():
    # eps fixed, h halved: HC of a smooth interface changes by under 1%
    eps = 16 / 64**2
    vals = []
    for n in (64, 128):
        g = Grid(n)
        pair = PhasePair.from_phase1(g, disc(g, (0.5, 0.5), 0.25))
        vals.append(heat_content(pair, HeatKernel(g, eps, 0.15)))
    assert abs(vals[1] - vals[0]) / vals[1] < 0.01
