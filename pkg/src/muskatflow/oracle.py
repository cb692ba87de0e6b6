"""Slow reference computations for small instances.

Everything here is written for auditability rather than speed: a dense
successive-shortest-path solver for the transportation problem, the
transport-plan form of the linearised step, an O(N^2) heat content and an
O(N^2) c-transform scan. Nothing in this module calls into the fast paths.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .fields import Grid, PhasePair

MAX_OT_SIDE = 12
MAX_PRIMAL_SIDE = 8
MAX_HC_SIDE = 32


class InfeasibleError(ValueError):
    pass


@dataclass
class TransportPlan:
    plan: np.ndarray      # (n_sources, n_targets) masses
    source: np.ndarray    # row sums
    target: np.ndarray    # column sums
    u: np.ndarray         # source potentials
    v: np.ndarray         # target potentials, cost[s, t] >= u[s] - v[t]

    @property
    def row_sums(self) -> np.ndarray:
        return self.plan.sum(axis=1)

    @property
    def col_sums(self) -> np.ndarray:
        return self.plan.sum(axis=0)


def _transport_ssp(a: np.ndarray, b: np.ndarray, C: np.ndarray):
    """Min-cost transportation by successive shortest paths with potentials.

    ``a`` (m,) supplies and ``b`` (n,) demands, all positive with equal sums;
    ``C`` (m, n) arbitrary real costs. Returns the plan and dual potentials
    ``(pi_s, pi_t)`` with ``C[s, t] + pi_s - pi_t >= 0`` and equality on the
    support of the plan.
    """
    m, n = C.shape
    total = a.sum()
    atol = 1e-14 * max(total, 1.0)
    flow = np.zeros((m, n))
    sup = a.astype(float).copy()
    dem = b.astype(float).copy()
    # initial potentials make every forward reduced cost non-negative
    pi_t = np.zeros(n)
    pi_s = -C.min(axis=1)
    for _ in range(10 * (m + n) * (m + n)):
        if sup.max() <= atol:
            break
        ds = np.full(m, np.inf)
        dt = np.full(n, np.inf)
        prev_t = np.full(n, -1)   # predecessor source of a target
        prev_s = np.full(m, -1)   # predecessor target of a source (backward edge)
        done_s = np.zeros(m, bool)
        done_t = np.zeros(n, bool)
        active = sup > atol
        ds[active] = 0.0
        sink = -1
        while True:
            cs = np.where(done_s, np.inf, ds)
            ct = np.where(done_t, np.inf, dt)
            i_s = int(np.argmin(cs))
            i_t = int(np.argmin(ct))
            if cs[i_s] == np.inf and ct[i_t] == np.inf:
                break
            if cs[i_s] <= ct[i_t]:
                done_s[i_s] = True
                red = C[i_s] + pi_s[i_s] - pi_t
                cand = ds[i_s] + np.maximum(red, 0.0)
                better = (~done_t) & (cand < dt)
                dt[better] = cand[better]
                prev_t[better] = i_s
            else:
                done_t[i_t] = True
                if dem[i_t] > atol:
                    sink = i_t
                    break
                back = flow[:, i_t] > atol
                red = -C[:, i_t] + pi_t[i_t] - pi_s
                cand = dt[i_t] + np.maximum(red, 0.0)
                better = back & (~done_s) & (cand < ds)
                ds[better] = cand[better]
                prev_s[better] = i_t
        if sink < 0:
            raise InfeasibleError("no augmenting path; supplies and demands inconsistent")
        dmax = dt[sink]
        pi_s += np.minimum(np.where(np.isfinite(ds), ds, dmax), dmax)
        pi_t += np.minimum(np.where(np.isfinite(dt), dt, dmax), dmax)
        # walk back to find the bottleneck
        path = []
        t = sink
        amount = dem[sink]
        while True:
            s = prev_t[t]
            path.append((s, t))
            if prev_s[s] < 0:
                amount = min(amount, sup[s])
                break
            t_prev = prev_s[s]
            amount = min(amount, flow[s, t_prev])
            path.append((s, -t_prev - 1))
            t = t_prev
        for s, t in path:
            if t >= 0:
                flow[s, t] += amount
            else:
                flow[s, -t - 1] -= amount
        sup[path[-1][0]] -= amount
        dem[sink] -= amount
    else:
        raise RuntimeError("transportation solver did not terminate")
    flow[flow < 0] = 0.0
    return flow, pi_s, pi_t


def ot_lp(mu: np.ndarray, nu: np.ndarray, cost: np.ndarray) -> tuple[float, TransportPlan]:
    """Exact discrete optimal transport between mass vectors ``mu`` and ``nu``."""
    mu = np.asarray(mu, dtype=float).ravel()
    nu = np.asarray(nu, dtype=float).ravel()
    cost = np.asarray(cost, dtype=float)
    if cost.shape != (mu.size, nu.size):
        raise ValueError(f"cost shape {cost.shape} does not match ({mu.size}, {nu.size})")
    if max(mu.size, nu.size) > MAX_OT_SIDE**2:
        raise ValueError(f"oracle limited to {MAX_OT_SIDE}x{MAX_OT_SIDE} grids")
    if mu.min() < 0 or nu.min() < 0:
        raise InfeasibleError("negative mass")
    if not math.isclose(mu.sum(), nu.sum(), rel_tol=1e-12, abs_tol=1e-15):
        raise InfeasibleError(f"total masses differ: {mu.sum()!r} vs {nu.sum()!r}")
    si = np.flatnonzero(mu > 0)
    ti = np.flatnonzero(nu > 0)
    plan = np.zeros((mu.size, nu.size))
    u = np.zeros(mu.size)
    v = np.zeros(nu.size)
    if si.size and ti.size:
        b = nu[ti] * (mu[si].sum() / nu[ti].sum())
        sub, pi_s, pi_t = _transport_ssp(mu[si], b, cost[np.ix_(si, ti)])
        plan[np.ix_(si, ti)] = sub
        u[si] = -pi_s
        v[ti] = -pi_t
    value = float(np.sum(plan * cost))
    return value, TransportPlan(plan, mu, nu, u, v)


def sq_distance_matrix(grid: Grid) -> np.ndarray:
    X, Y = grid.xy
    P = np.stack([X.ravel(), Y.ravel()], axis=1)
    return ((P[:, None, :] - P[None, :, :]) ** 2).sum(axis=-1)


@dataclass
class PrimalSolution:
    value: float
    plans: tuple[np.ndarray, np.ndarray]   # (N, N) cell-to-cell masses per phase
    target_marginals: tuple[np.ndarray, np.ndarray]  # densities on the grid

    def characteristic_report(self, atol: float = 1e-9) -> dict:
        t1 = self.target_marginals[0]
        frac = (t1 > atol) & (t1 < 1 - atol)
        return {"fractional_cells": int(frac.sum()), "characteristic": not bool(frac.any())}


def linearized_primal_lp(pair: PhasePair, psi1: np.ndarray, psi2: np.ndarray,
                         tau: float) -> PrimalSolution:
    """Transport-plan form of the linearised step, solved exactly.

    Minimises ``sum_i sum_xy g_i(x, y) [psi_i(y) + b_i |x - y|^2 / (2 tau)]``
    over plans with source marginals ``rho_i^n h^2`` and joint target
    marginal ``h^2`` on every cell.
    """
    grid = pair.grid
    if grid.nx > MAX_PRIMAL_SIDE:
        raise ValueError(f"primal oracle limited to {MAX_PRIMAL_SIDE}x{MAX_PRIMAL_SIDE}")
    h2 = grid.h**2
    D = sq_distance_matrix(grid)
    N = grid.size
    blocks = []
    masses = []
    for rho, psi, b in ((pair.rho1, psi1, pair.b1), (pair.rho2, psi2, pair.b2)):
        blocks.append(np.asarray(psi, dtype=float).ravel()[None, :] + b / (2 * tau) * D)
        masses.append(rho.ravel() * h2)
    mu = np.concatenate(masses)
    nu = np.full(N, h2)
    cost = np.vstack(blocks)
    if not math.isclose(mu.sum(), nu.sum(), rel_tol=1e-12):
        raise InfeasibleError("phases do not fill the domain")
    si = np.flatnonzero(mu > 0)
    sub, _, _ = _transport_ssp(mu[si], nu, cost[si])
    full = np.zeros((2 * N, N))
    full[si] = sub
    g1, g2 = full[:N], full[N:]
    value = float(np.sum(full * cost))
    marg = (g1.sum(axis=0).reshape(grid.shape) / h2, g2.sum(axis=0).reshape(grid.shape) / h2)
    return PrimalSolution(value, (g1, g2), marg)


def hc_direct(rho1: np.ndarray, rho2: np.ndarray, grid: Grid, eps: float, sigma: float) -> float:
    """Double sum over all cell pairs with the continuous heat kernel."""
    if grid.nx > MAX_HC_SIDE:
        raise ValueError(f"direct heat content limited to {MAX_HC_SIDE}x{MAX_HC_SIDE}")
    D = sq_distance_matrix(grid)
    G = np.exp(-D / (4 * eps)) / (4 * math.pi * eps)
    h4 = grid.h**4
    total = float(np.asarray(rho2, dtype=float).ravel() @ G @ np.asarray(rho1, dtype=float).ravel())
    return sigma * math.sqrt(2 * math.pi / eps) * h4 * total


def ctransform_scan(f: np.ndarray, w: float, grid: Grid) -> tuple[np.ndarray, np.ndarray]:
    """O(N^2) scan of ``min_y f(y) + w |y - x|^2`` with smallest-index ties."""
    D = sq_distance_matrix(grid)
    C = np.asarray(f, dtype=float).ravel()[None, :] + w * D
    return C.min(axis=1).reshape(grid.shape), C.argmin(axis=1).reshape(grid.shape)
