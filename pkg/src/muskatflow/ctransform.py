"""Exact quadratic c-transforms on the grid.

``f^c(x) = min_y f(y) + w |y - x|^2`` over grid cells ``y``, computed with
two passes of the 1-D lower envelope of parabolas (columns, then rows).
The envelope keeps the apex index of each parabola, so the minimising cell
comes out alongside the value.
"""
from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .fields import FieldError, Grid


@dataclass(frozen=True)
class CTransformResult:
    values: np.ndarray
    argmin: np.ndarray  # linear cell index i * ny + j of the minimiser
    weight: float

    def target_indices(self) -> tuple[np.ndarray, np.ndarray]:
        ny = self.argmin.shape[1]
        return np.divmod(self.argmin, ny)


@numba.njit(cache=True)
def _envelope_1d(f, W, out_val, out_arg, v, z):
    """Lower envelope of ``f[k] + W (q - k)^2`` evaluated at integer ``q``.

    Entries equal to +inf contribute no parabola. On exact ties the smaller
    apex index wins. ``v`` and ``z`` are scratch buffers of length n and n+1.
    """
    n = f.shape[0]
    k = -1
    for q in range(n):
        fq = f[q]
        if fq == np.inf:
            continue
        if k < 0:
            k = 0
            v[0] = q
            z[0] = -np.inf
            z[1] = np.inf
            continue
        while True:
            p = v[k]
            s = ((fq + W * q * q) - (f[p] + W * p * p)) / (2.0 * W * (q - p))
            if s <= z[k]:
                k -= 1
                if k < 0:
                    break
            else:
                break
        if k < 0:
            k = 0
            v[0] = q
            z[0] = -np.inf
            z[1] = np.inf
        else:
            k += 1
            v[k] = q
            z[k] = s
            z[k + 1] = np.inf
    if k < 0:
        for q in range(n):
            out_val[q] = np.inf
            out_arg[q] = -1
        return
    k = 0
    for q in range(n):
        while z[k + 1] < q:
            k += 1
        p = v[k]
        out_val[q] = f[p] + W * (q - p) * (q - p)
        out_arg[q] = p


@numba.njit(cache=True)
def _ctransform_2d(f, W):
    nx, ny = f.shape
    g = np.empty((nx, ny))
    gj = np.empty((nx, ny), dtype=np.int64)
    nmax = max(nx, ny)
    v = np.empty(nmax, dtype=np.int64)
    z = np.empty(nmax + 1)
    col_val = np.empty(nmax)
    col_arg = np.empty(nmax, dtype=np.int64)
    line = np.empty(nmax)
    # pass 1: along y for every x-column i
    for i in range(nx):
        for j in range(ny):
            line[j] = f[i, j]
        _envelope_1d(line[:ny], W, col_val[:ny], col_arg[:ny], v, z)
        for j in range(ny):
            g[i, j] = col_val[j]
            gj[i, j] = col_arg[j]
    out = np.empty((nx, ny))
    arg = np.empty((nx, ny), dtype=np.int64)
    # pass 2: along x for every y-row j
    for j in range(ny):
        for i in range(nx):
            line[i] = g[i, j]
        _envelope_1d(line[:nx], W, col_val[:nx], col_arg[:nx], v, z)
        for i in range(nx):
            ti = col_arg[i]
            tj = gj[ti, j]
            di = ti - i
            dj = tj - j
            out[i, j] = f[ti, tj] + W * (di * di + dj * dj)
            arg[i, j] = ti * ny + tj
    return out, arg


def quadratic_ctransform(f: np.ndarray, w: float, grid: Grid) -> CTransformResult:
    """Discrete infimal convolution of ``f`` with ``w |.|^2`` and its argmin map.

    ``f`` may contain ``+inf`` for cells that are not allowed as targets; at
    least one entry must be finite.
    """
    if not w > 0:
        raise FieldError("c-transform weight must be positive")
    f = np.asarray(f, dtype=float)
    if f.shape != grid.shape:
        raise FieldError(f"field shape {f.shape} does not match grid {grid.shape}")
    if np.any(np.isnan(f)) or np.any(f == -np.inf):
        raise FieldError("c-transform input must be finite or +inf")
    if not np.any(np.isfinite(f)):
        raise FieldError("c-transform of an everywhere-infinite field")
    vals, arg = _ctransform_2d(np.ascontiguousarray(f), float(w) * grid.h**2)
    return CTransformResult(vals, arg, float(w))


def reverse_ctransform(g: np.ndarray, w: float, grid: Grid) -> np.ndarray:
    """``g^cbar(y) = max_x g(x) - w |x - y|^2``."""
    return -quadratic_ctransform(-np.asarray(g, dtype=float), w, grid).values


def pushforward(rho: np.ndarray, argmin: np.ndarray) -> np.ndarray:
    """Density of the mass ``rho(x) h^2`` moved to cell ``argmin[x]``."""
    rho = np.asarray(rho, dtype=float)
    idx = np.asarray(argmin).ravel()
    if idx.min() < 0 or idx.max() >= rho.size:
        raise FieldError("argmin map points outside the grid")
    return np.bincount(idx, weights=rho.ravel(), minlength=rho.size).reshape(rho.shape)
