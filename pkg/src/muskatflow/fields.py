"""Uniform cell-centred grids on the unit square and the two-phase container.

Arrays are indexed ``f[i, j]`` with ``i`` along x and ``j`` along y; cell
``(i, j)`` has its centre at ``((i + 1/2) h, (j + 1/2) h)``. Vector fields
carry the component on a leading axis of length 2.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np


class FieldError(ValueError):
    """Raised when a field violates a structural invariant."""


@dataclass(frozen=True)
class Grid:
    nx: int
    ny: int | None = None

    def __post_init__(self):
        ny = self.nx if self.ny is None else self.ny
        object.__setattr__(self, "ny", ny)
        if self.nx != ny:
            raise FieldError(f"unit square needs nx == ny, got {self.nx} x {ny}")
        if self.nx < 4:
            raise FieldError(f"grid needs at least 4 cells per side, got {self.nx}")

    @property
    def h(self) -> float:
        return 1.0 / self.nx

    @property
    def shape(self) -> tuple[int, int]:
        return (self.nx, self.ny)

    @property
    def size(self) -> int:
        return self.nx * self.ny

    @cached_property
    def centers(self) -> np.ndarray:
        return (np.arange(self.nx) + 0.5) * self.h

    @cached_property
    def xy(self) -> tuple[np.ndarray, np.ndarray]:
        """Cell-centre coordinate arrays ``(X, Y)``, each of shape ``(nx, ny)``."""
        X, Y = np.meshgrid(self.centers, self.centers, indexing="ij")
        X.setflags(write=False)
        Y.setflags(write=False)
        return X, Y

    def zeros(self) -> np.ndarray:
        return np.zeros(self.shape)

    def check(self, f: np.ndarray, name: str = "field") -> np.ndarray:
        f = np.asarray(f, dtype=float)
        if f.shape != self.shape:
            raise FieldError(f"{name} has shape {f.shape}, grid is {self.shape}")
        if not np.all(np.isfinite(f)):
            raise FieldError(f"{name} has non-finite values")
        return f


def integrate(f: np.ndarray, grid: Grid) -> float:
    """Midpoint-rule integral ``h^2 * sum(f)`` over the unit square."""
    return float(np.sum(f)) * grid.h**2


def gradient_central(f: np.ndarray, grid: Grid) -> np.ndarray:
    """Central differences inside, first-order one-sided at the walls."""
    gx, gy = np.gradient(np.asarray(f, dtype=float), grid.h, edge_order=1)
    return np.stack([gx, gy])


def upwind_gradient(f: np.ndarray, v: np.ndarray, grid: Grid) -> np.ndarray:
    """Componentwise upwind differences of ``f`` for transport by ``v``.

    A positive velocity component takes the backward difference, a negative
    one the forward difference. Where the upwind neighbour lies outside the
    domain the ghost value equals the cell value (homogeneous Neumann), so
    the difference vanishes there.
    """
    f = np.asarray(f, dtype=float)
    h = grid.h
    out = np.zeros((2,) + f.shape)
    for axis in (0, 1):
        back = np.zeros_like(f)
        fwd = np.zeros_like(f)
        d = np.diff(f, axis=axis) / h
        if axis == 0:
            back[1:, :] = d
            fwd[:-1, :] = d
        else:
            back[:, 1:] = d
            fwd[:, :-1] = d
        out[axis] = np.where(v[axis] > 0, back, fwd)
    return out


def tv_perimeter(rho: np.ndarray, grid: Grid) -> float:
    """Total variation ``|D rho|(Omega)`` from one-sided differences.

    The isotropic pointwise norm is averaged over the four forward/backward
    difference pairings, which makes the estimate invariant under 90 degree
    rotations while keeping axis-aligned cuts exact. Jumps across the domain
    wall are not counted.
    """
    rho = np.asarray(rho, dtype=float)
    dx = np.diff(rho, axis=0)
    dy = np.diff(rho, axis=1)
    nx, ny = rho.shape
    fx = np.zeros((nx, ny))
    bx = np.zeros((nx, ny))
    fy = np.zeros((nx, ny))
    by = np.zeros((nx, ny))
    fx[:-1, :] = dx
    bx[1:, :] = dx
    fy[:, :-1] = dy
    by[:, 1:] = dy
    total = 0.0
    for gx in (fx, bx):
        for gy in (fy, by):
            total += float(np.sum(np.hypot(gx, gy)))
    # h * sum |grad| with grad = diff / h
    return total / 4.0 * grid.h


@dataclass
class PhasePair:
    """Relative concentrations of the two phases plus their mobilities.

    ``mass1``/``mass2`` are the target masses fixed at construction; later
    steps are measured against them.
    """

    grid: Grid
    rho1: np.ndarray
    rho2: np.ndarray
    b1: float = 1.0
    b2: float = 1.0
    mass1: float = field(default=float("nan"))
    mass2: float = field(default=float("nan"))

    def __post_init__(self):
        self.rho1 = self.grid.check(self.rho1, "rho1")
        self.rho2 = self.grid.check(self.rho2, "rho2")
        for name, r in (("rho1", self.rho1), ("rho2", self.rho2)):
            if r.min() < 0.0 or r.max() > 1.0:
                raise FieldError(f"{name} leaves [0, 1]")
        if not np.allclose(self.rho1 + self.rho2, 1.0, rtol=0.0, atol=1e-12):
            raise FieldError("rho1 + rho2 != 1 somewhere")
        if self.b1 <= 0 or self.b2 <= 0:
            raise FieldError("mobilities must be positive")
        if np.isnan(self.mass1):
            self.mass1 = integrate(self.rho1, self.grid)
        if np.isnan(self.mass2):
            self.mass2 = integrate(self.rho2, self.grid)

    @classmethod
    def from_phase1(cls, grid: Grid, rho1: np.ndarray, b1: float = 1.0, b2: float = 1.0,
                    **kw) -> "PhasePair":
        rho1 = np.asarray(rho1, dtype=float)
        return cls(grid, rho1, 1.0 - rho1, b1, b2, **kw)

    @property
    def characteristic(self) -> bool:
        return bool(np.all((self.rho1 == 0.0) | (self.rho1 == 1.0))
                    and np.all(self.rho1 + self.rho2 == 1.0))

    def with_phase1(self, rho1: np.ndarray) -> "PhasePair":
        """New pair on the same grid, mobilities and target masses."""
        return PhasePair.from_phase1(self.grid, rho1, self.b1, self.b2,
                                     mass1=self.mass1, mass2=self.mass2)

    def swapped(self) -> "PhasePair":
        return PhasePair(self.grid, self.rho2.copy(), self.rho1.copy(), self.b2, self.b1,
                         mass1=self.mass2, mass2=self.mass1)

    def masses(self) -> tuple[float, float]:
        return integrate(self.rho1, self.grid), integrate(self.rho2, self.grid)


# -- raw dumps: <u4 nx, <u4 ny, then nx*ny <f8 values, one y-row of nx values at a time

def dump_raw(f: np.ndarray, path: str | Path) -> None:
    f = np.asarray(f, dtype="<f8")
    nx, ny = f.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack("<II", nx, ny))
        fh.write(np.ascontiguousarray(f.T).tobytes())


def load_raw(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    nx, ny = struct.unpack("<II", data[:8])
    values = np.frombuffer(data[8:], dtype="<f8")
    if values.size != nx * ny:
        raise FieldError(f"{path}: header says {nx}x{ny}, found {values.size} values")
    return values.reshape(ny, nx).T.copy()
