"""Level-set representation of the interface.

Sign convention: ``phi < 0`` inside phase 1. The time stepper carries ``phi``
from step to step so that sub-cell interface positions survive thresholding.
"""
from __future__ import annotations

import logging

import numba
import numpy as np

from .fields import Grid, upwind_gradient

log = logging.getLogger(__name__)

FAR = 1e10


class EmptyPhase(ValueError):
    pass


class Unreachable(ValueError):
    pass


@numba.njit(cache=True)
def _seed(phi, h):
    """Unsigned distance on cells next to a sign change, FAR elsewhere.

    Along each axis the interface is placed by linear interpolation between
    the cell and its opposite-sign neighbour; the two axis intercepts are
    combined as the distance to the line through them.
    """
    nx, ny = phi.shape
    d = np.full((nx, ny), FAR)
    fixed = np.zeros((nx, ny), dtype=np.bool_)
    for i in range(nx):
        for j in range(ny):
            a = phi[i, j]
            dx = FAR
            dy = FAR
            for di in (-1, 1):
                k = i + di
                if 0 <= k < nx:
                    b = phi[k, j]
                    if (a < 0.0) != (b < 0.0):
                        dx = min(dx, h * abs(a) / (abs(a) + abs(b)) if a != b else 0.0)
            for dj in (-1, 1):
                k = j + dj
                if 0 <= k < ny:
                    b = phi[i, k]
                    if (a < 0.0) != (b < 0.0):
                        dy = min(dy, h * abs(a) / (abs(a) + abs(b)) if a != b else 0.0)
            if dx < FAR or dy < FAR:
                fixed[i, j] = True
                if dx < FAR and dy < FAR:
                    if dx == 0.0 or dy == 0.0:
                        d[i, j] = 0.0
                    else:
                        d[i, j] = 1.0 / np.sqrt(1.0 / (dx * dx) + 1.0 / (dy * dy))
                else:
                    d[i, j] = min(dx, dy)
    return d, fixed


@numba.njit(cache=True)
def _sweep(u, fixed, h, max_rounds):
    nx, ny = u.shape
    for _ in range(max_rounds):
        change = 0.0
        for sweep in range(4):
            istart, iend, istep = (0, nx, 1) if sweep % 2 == 0 else (nx - 1, -1, -1)
            jstart, jend, jstep = (0, ny, 1) if sweep < 2 else (ny - 1, -1, -1)
            for i in range(istart, iend, istep):
                for j in range(jstart, jend, jstep):
                    if fixed[i, j]:
                        continue
                    a = FAR
                    if i > 0:
                        a = u[i - 1, j]
                    if i < nx - 1:
                        a = min(a, u[i + 1, j])
                    b = FAR
                    if j > 0:
                        b = u[i, j - 1]
                    if j < ny - 1:
                        b = min(b, u[i, j + 1])
                    if abs(a - b) >= h:
                        cand = min(a, b) + h
                    else:
                        cand = 0.5 * (a + b + np.sqrt(2.0 * h * h - (a - b) ** 2))
                    if cand < u[i, j]:
                        change = max(change, u[i, j] - cand)
                        u[i, j] = cand
        if change < 1e-13:
            break
    return u


def redistance(phi: np.ndarray, grid: Grid, max_rounds: int = 8) -> np.ndarray:
    """Signed distance to the zero level of ``phi`` by fast sweeping."""
    phi = np.ascontiguousarray(phi, dtype=float)
    if phi.min() >= 0.0 or phi.max() < 0.0:
        raise EmptyPhase("level set has no sign change")
    d, fixed = _seed(phi, grid.h)
    d = _sweep(d, fixed, grid.h, max_rounds)
    return np.where(phi < 0.0, -d, d)


def signed_distance(rho1: np.ndarray, grid: Grid) -> np.ndarray:
    """Signed distance to the boundary of the phase-1 region (negative inside)."""
    rho1 = np.asarray(rho1, dtype=float)
    inside = rho1 > 0.5
    if not inside.any() or inside.all():
        raise EmptyPhase("one of the phases is empty")
    return redistance(0.5 - rho1, grid)


def advect(phi: np.ndarray, v: np.ndarray, tau: float, grid: Grid, cfl: float = 0.5):
    """First-order upwind transport ``phi_t + v . grad phi = 0`` over time ``tau``.

    Substeps satisfy ``dt * max(|v_x| + |v_y|) <= cfl * h``, which keeps the
    update a convex combination of neighbouring values for ``cfl <= 1``.
    """
    phi = np.array(phi, dtype=float)
    v = np.asarray(v, dtype=float)
    speed = float(np.max(np.abs(v[0]) + np.abs(v[1])))
    if speed == 0.0 or tau <= 0.0:
        return phi
    remaining = tau
    dt_max = cfl * grid.h / speed
    nsub = 0
    while remaining > 1e-15 * tau:
        dt = min(remaining, dt_max)
        g = upwind_gradient(phi, v, grid)
        phi = phi - dt * (v[0] * g[0] + v[1] * g[1])
        remaining -= dt
        nsub += 1
    return phi


def threshold_with_mass(phi: np.ndarray, mass1: float, grid: Grid) -> tuple[np.ndarray, float]:
    """Indicator of ``{phi < c}`` with ``c`` chosen so its area matches ``mass1``.

    The level is found by bisection on ``c``; the returned area is within
    ``h^2 / 2`` of ``mass1``.
    """
    phi = np.asarray(phi, dtype=float)
    h2 = grid.h**2
    N = phi.size
    target = int(round(mass1 / h2))
    if not (0 <= target <= N) or abs(target * h2 - mass1) > 0.5 * h2 + 1e-15:
        raise Unreachable(f"mass {mass1} not attainable on this grid")
    lo, hi = float(phi.min()), float(phi.max())
    if not lo < hi:
        raise Unreachable("level set is constant")
    if target == 0:
        c = lo
    elif target == N:
        c = np.nextafter(hi, np.inf)
    else:
        a, b = lo, hi
        c = 0.5 * (a + b)
        for _ in range(200):
            c = 0.5 * (a + b)
            n = int(np.count_nonzero(phi < c))
            if n == target:
                break
            if n < target:
                a = c
            else:
                b = c
        else:
            # ties in phi: fall back to the order statistic
            order = np.sort(phi.ravel())
            c = 0.5 * (order[target - 1] + order[target])
    rho1 = (phi < c).astype(float)
    area = float(rho1.sum()) * h2
    if abs(area - mass1) > 0.5 * h2 + 1e-15:
        raise Unreachable(f"level-set ties prevent area {mass1}; got {area}")
    if abs(c) > grid.h:
        log.info("mass fix moved the level by %.3g (> h)", c)
    return rho1, float(c)
