"""Dual pressure solve for the linearised step.

Maximises the concave dual

    J(p) = int (p + psi_1)^{c_1} rho_1 + (p + psi_2)^{c_2} rho_2 - p

where ``c_i`` is the quadratic c-transform with weight ``b_i / (2 tau)``.
The supergradient of ``J`` is the residual ``(T_1)# rho_1 + (T_2)# rho_2 - 1``
of the incompressibility constraint; ascent steps are preconditioned by
``(alpha I - beta Laplacian)^-1`` with Neumann walls.

Two transport models are available:

``"grid"``
    Mass moves from cell to cell. ``J`` is then exactly the dual of the
    discrete transport problem solved by :mod:`muskatflow.oracle`. Ascent
    alternates pressure ("forth") and source-potential ("back") steps and is
    finished by an epsilon-scaling auction, which makes the optimum exact up
    to a prescribed gap.

``"subcell"``
    Targets range over the bilinear interpolant of ``p + psi`` between cell
    centres and mass is deposited with cloud-in-cell weights. Sub-cell
    displacements are resolved, so small time steps do not pin the flow to
    the grid. Used by the time stepper.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numba
import numpy as np
from scipy.fft import dctn, idctn

from .ctransform import pushforward, quadratic_ctransform
from .fields import FieldError, Grid, PhasePair

log = logging.getLogger(__name__)

TRANSPORTS = ("grid", "subcell")
GAUGE_LATTICE = 2.0**36


@dataclass
class BfmOptions:
    max_iters: int = 500
    tol_res: float = 1e-4
    tol_dual: float = 1e-8      # stop when an accepted step gains less than this, relative
    alpha: float | None = None   # default: 1% of the lowest Neumann mode of beta * (-Laplacian)
    beta: float | None = None    # default: tau / max(b1, b2)
    step0: float = 1.0
    max_backtracks: int = 12
    armijo: float = 0.1          # sufficient-increase fraction of the predicted gain
    transport: str = "subcell"
    subsamples: int = 1          # k x k sample points per source cell (subcell transport)
    back_steps: bool = True      # grid transport only
    finish_exact: bool = True    # grid transport only
    auction_gap: float = 1e-9
    log_csv: object = None       # writable text stream for per-iteration CSV lines

    def __post_init__(self):
        if self.transport not in TRANSPORTS:
            raise ValueError(f"transport must be one of {TRANSPORTS}")
        for name in ("max_iters", "tol_res", "step0", "max_backtracks", "auction_gap", "subsamples"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0 <= self.armijo < 1:
            raise ValueError("armijo must lie in [0, 1)")
        for name in ("alpha", "beta"):
            v = getattr(self, name)
            if v is not None and not v > 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class DualState:
    grid: Grid
    tau: float
    rho1: np.ndarray
    rho2: np.ndarray
    p: np.ndarray
    phi1: np.ndarray
    phi2: np.ndarray
    T1: np.ndarray                 # linear index of the grid minimiser
    T2: np.ndarray
    Y1: np.ndarray                 # (2, nx, ny) target positions in physical units
    Y2: np.ndarray
    residual: np.ndarray
    J: float
    iterations: int = 0
    converged: bool = False
    transport: str = "subcell"
    history: list = field(default_factory=list)

    @property
    def residual_l1(self) -> float:
        return float(np.abs(self.residual).sum()) * self.grid.h**2


class NonConvergence(RuntimeError):
    def __init__(self, state: DualState, reason: str = ""):
        self.state = state
        self.residual = state.residual_l1
        self.iterations = state.iterations
        super().__init__(f"dual solve stopped after {state.iterations} iterations with "
                         f"L1 residual {self.residual:.3e}{': ' + reason if reason else ''}")


# --------------------------------------------------------------------- subcell

@numba.njit(cache=True)
def _box_min(f00, f10, f01, f11, W, sx, tx):
    """Exact minimum over [0,1]^2 of the bilinear interpolant plus W|(s,t)-(sx,tx)|^2."""
    c1 = f10 - f00
    c2 = f01 - f00
    c3 = f00 - f10 - f01 + f11
    best = np.inf
    bs = 0.0
    bt = 0.0
    for e in range(4):
        if e < 2:
            s = float(e)
            t = tx - (c2 + c3 * s) / (2.0 * W)
            t = min(1.0, max(0.0, t))
        else:
            t = float(e - 2)
            s = sx - (c1 + c3 * t) / (2.0 * W)
            s = min(1.0, max(0.0, s))
        val = f00 + c1 * s + c2 * t + c3 * s * t + W * ((s - sx) ** 2 + (t - tx) ** 2)
        if val < best:
            best = val
            bs = s
            bt = t
    det = 4.0 * W * W - c3 * c3
    if det > 0.0:
        r1 = 2.0 * W * sx - c1
        r2 = 2.0 * W * tx - c2
        s = (2.0 * W * r1 - c3 * r2) / det
        t = (2.0 * W * r2 - c3 * r1) / det
        if 0.0 < s < 1.0 and 0.0 < t < 1.0:
            val = f00 + c1 * s + c2 * t + c3 * s * t + W * ((s - sx) ** 2 + (t - tx) ** 2)
            if val < best:
                best = val
                bs = s
                bt = t
    return best, bs, bt


@numba.njit(cache=True)
def _subcell_transform(f, W, arg, grid_val, rho, k):
    """Sub-cell targets for the mass of each source cell.

    The source cell is sampled at ``k x k`` points; each point is sent to the
    exact minimiser of the bilinear interpolant of ``f`` plus ``W|y - x|^2``
    over the boxes around the grid minimiser and deposited with bilinear
    weights. Returns the mass-averaged value and target per source cell and
    the pushed-forward density. Cells without mass keep the grid result.
    """
    nx, ny = f.shape
    val = np.empty((nx, ny))
    yi = np.empty((nx, ny))
    yj = np.empty((nx, ny))
    push = np.zeros((nx, ny))
    reach = 1 if k == 1 else 2
    for i in range(nx):
        for j in range(ny):
            a = arg[i, j]
            ti = a // ny
            tj = a % ny
            m = rho[i, j]
            if m == 0.0:
                val[i, j] = grid_val[i, j]
                yi[i, j] = ti
                yj[i, j] = tj
                continue
            acc = 0.0
            si = 0.0
            sj = 0.0
            mm = m / (k * k)
            for a1 in range(k):
                for b1 in range(k):
                    x = i + (a1 + 0.5) / k - 0.5
                    y = j + (b1 + 0.5) / k - 0.5
                    bci = min(ti, nx - 2)
                    bcj = min(tj, ny - 2)
                    bs = float(ti - bci)
                    bt = float(tj - bcj)
                    best = f[ti, tj] + W * ((ti - x) ** 2 + (tj - y) ** 2)
                    for ci in range(ti - reach, ti + reach):
                        if ci < 0 or ci > nx - 2:
                            continue
                        for cj in range(tj - reach, tj + reach):
                            if cj < 0 or cj > ny - 2:
                                continue
                            v, s, t = _box_min(f[ci, cj], f[ci + 1, cj], f[ci, cj + 1],
                                               f[ci + 1, cj + 1], W, x - ci, y - cj)
                            if v < best:
                                best = v
                                bci = ci
                                bcj = cj
                                bs = s
                                bt = t
                    acc += best
                    si += bci + bs
                    sj += bcj + bt
                    push[bci, bcj] += mm * (1.0 - bs) * (1.0 - bt)
                    push[bci + 1, bcj] += mm * bs * (1.0 - bt)
                    push[bci, bcj + 1] += mm * (1.0 - bs) * bt
                    push[bci + 1, bcj + 1] += mm * bs * bt
            val[i, j] = acc / (k * k)
            yi[i, j] = si / (k * k)
            yj[i, j] = sj / (k * k)
    return val, yi, yj, push


@dataclass
class _Transform:
    values: np.ndarray
    argmin: np.ndarray
    Y: np.ndarray
    push: np.ndarray


def _transform(f, w, rho, grid: Grid, transport: str, subsamples: int = 1) -> _Transform:
    ct = quadratic_ctransform(f, w, grid)
    h = grid.h
    if transport == "grid":
        ti, tj = ct.target_indices()
        Y = np.stack([(ti + 0.5) * h, (tj + 0.5) * h])
        return _Transform(ct.values, ct.argmin, Y, pushforward(rho, ct.argmin))
    val, yi, yj, push = _subcell_transform(np.ascontiguousarray(f), w * h * h, ct.argmin,
                                           ct.values, np.ascontiguousarray(rho, dtype=float),
                                           int(subsamples))
    Y = np.stack([(yi + 0.5) * h, (yj + 0.5) * h])
    return _Transform(val, ct.argmin, Y, push)


# ------------------------------------------------------------------ dual value

def _weights(pair: PhasePair, tau: float) -> tuple[float, float]:
    return pair.b1 / (2.0 * tau), pair.b2 / (2.0 * tau)


def dual_value(p, psi1, psi2, pair: PhasePair, tau: float, transport: str = "grid",
               subsamples: int = 1) -> float:
    """``J(p)`` evaluated with exact c-transforms."""
    grid = pair.grid
    w1, w2 = _weights(pair, tau)
    h2 = grid.h**2
    total = -float(np.sum(p))
    for rho, psi, w in ((pair.rho1, psi1, w1), (pair.rho2, psi2, w2)):
        tr = _transform(np.asarray(p) + psi, w, rho, grid, transport, subsamples)
        total += float(np.sum(tr.values * rho))
    return total * h2


class NeumannPreconditioner:
    """Solves ``(alpha I - beta Laplacian) u = r`` with homogeneous Neumann walls."""

    def __init__(self, grid: Grid, alpha: float, beta: float):
        n = grid.nx
        k = np.arange(n)
        lam = (2.0 - 2.0 * np.cos(np.pi * k / n)) / grid.h**2
        self.denom = alpha + beta * (lam[:, None] + lam[None, :])

    def __call__(self, r: np.ndarray) -> np.ndarray:
        return idctn(dctn(r, type=2, norm="ortho") / self.denom, type=2, norm="ortho")


def default_preconditioner(grid: Grid, pair: PhasePair, tau: float,
                           opts: BfmOptions) -> NeumannPreconditioner:
    beta = opts.beta if opts.beta is not None else tau / max(pair.b1, pair.b2)
    alpha = opts.alpha if opts.alpha is not None else 0.01 * beta * 2 * np.pi**2
    return NeumannPreconditioner(grid, alpha, beta)


# ---------------------------------------------------------------------- solver

class _Evaluator:
    def __init__(self, pair: PhasePair, psi1, psi2, tau, transport, subsamples=1):
        self.pair = pair
        self.psi = (np.asarray(psi1, dtype=float), np.asarray(psi2, dtype=float))
        self.tau = tau
        self.w = _weights(pair, tau)
        self.transport = transport
        self.subsamples = subsamples
        self.h2 = pair.grid.h**2
        self.evals = 0

    def __call__(self, p):
        self.evals += 1
        pair = self.pair
        t1 = _transform(p + self.psi[0], self.w[0], pair.rho1, pair.grid, self.transport,
                        self.subsamples)
        t2 = _transform(p + self.psi[1], self.w[1], pair.rho2, pair.grid, self.transport,
                        self.subsamples)
        J = (float(np.sum(t1.values * pair.rho1)) + float(np.sum(t2.values * pair.rho2))
             - float(np.sum(p))) * self.h2
        return J, t1, t2


def _state(ev: _Evaluator, p, J, t1, t2, it, transport, history) -> DualState:
    pair = ev.pair
    return DualState(pair.grid, ev.tau, pair.rho1, pair.rho2, p, t1.values, t2.values,
                     t1.argmin, t2.argmin, t1.Y, t2.Y, t1.push + t2.push - 1.0, J,
                     it, False, transport, history)


def _gains(new: float, old: float) -> bool:
    # J is piecewise linear: ignore gains at rounding level so that flat
    # directions are rejected the same way in every gauge
    return new - old > 1e-13 * max(1.0, abs(old))


def _emit(opts: BfmOptions, history: list, it: int, J: float, res: float, step: float, kind: str):
    history.append((it, J, res, step, kind))
    if opts.log_csv is not None:
        opts.log_csv.write(f"{it},{J:.17g},{res:.6e},{step:.6e}\n")


def solve_dual(pair: PhasePair, psi1, psi2, tau: float, opts: BfmOptions | None = None,
               p0: np.ndarray | None = None) -> DualState:
    """Maximise ``J`` by preconditioned back-and-forth ascent.

    Raises :class:`NonConvergence` (carrying the final state) when the L1
    residual is still above ``opts.tol_res`` at the end.
    """
    opts = opts or BfmOptions()
    grid = pair.grid
    if not tau > 0:
        raise ValueError("tau must be positive")
    if opts.transport == "grid" and not pair.characteristic:
        raise FieldError("grid transport needs characteristic phases")
    ev = _Evaluator(pair, psi1, psi2, tau, opts.transport, opts.subsamples)
    precond = default_preconditioner(grid, pair, tau, opts)
    # J is gauge invariant; start every solve from the mean-free representative,
    # snapped to a dyadic lattice, so that p0 and p0 + c follow the same iterates
    # even where the supergradient has exact ties
    p = np.zeros(grid.shape) if p0 is None else np.array(p0, dtype=float)
    p = np.round((p - p.mean()) * GAUGE_LATTICE) / GAUGE_LATTICE
    J, t1, t2 = ev(p)
    history: list = []
    step = opts.step0
    it = 0
    state = _state(ev, p, J, t1, t2, it, opts.transport, history)
    _emit(opts, history, it, J, state.residual_l1, step, "init")
    stalled = False
    while it < opts.max_iters and state.residual_l1 > opts.tol_res:
        it += 1
        direction = precond(state.residual)
        # predicted first-order gain per unit step
        slope = float(np.sum(state.residual * direction)) * ev.h2
        best = None
        for _ in range(opts.max_backtracks):
            p_try = state.p + step * direction
            J_try, t1, t2 = ev(p_try)
            if _gains(J_try, state.J):
                if J_try - state.J >= opts.armijo * step * slope:
                    best = (J_try, t1, t2, p_try, step)
                    break
                if best is None or J_try > best[0]:
                    best = (J_try, t1, t2, p_try, step)
            step *= 0.5
        if best is None:
            stalled = True
            _emit(opts, history, it, state.J, state.residual_l1, step, "stall")
            break
        # without a sufficient increase fall back to the best improving step
        J_try, t1, t2, p_try, step = best
        gain = J_try - state.J
        state = _state(ev, p_try, J_try, t1, t2, it, opts.transport, history)
        _emit(opts, history, it, J_try, state.residual_l1, step, "forth")
        step *= 2.0
        if opts.transport == "grid" and opts.back_steps and state.residual_l1 > opts.tol_res:
            state = _back_step(ev, state, precond, opts, history)
        if gain <= opts.tol_dual * max(1.0, abs(state.J)):
            stalled = True
            break
    if state.residual_l1 > opts.tol_res and opts.transport == "grid" and opts.finish_exact:
        state = _auction_finish(ev, state, opts, history)
    state.iterations = it
    state.converged = state.residual_l1 <= opts.tol_res
    if not state.converged:
        raise NonConvergence(state, "stalled" if stalled else "iteration limit")
    return state


# ------------------------------------------------------------- grid back step

def _reverse(u, support, w, grid):
    """``u^cbar(y) = max_{x in support} u(x) - w|x - y|^2`` and its argmax."""
    g = np.where(support, -u, np.inf)
    ct = quadratic_ctransform(g, w, grid)
    return -ct.values, ct.argmin


def _back_value(ev: _Evaluator, u1, u2):
    pair = ev.pair
    grid = pair.grid
    s1 = pair.rho1 > 0
    s2 = pair.rho2 > 0
    cands = []
    args = []
    for u, s, w, psi in ((u1, s1, ev.w[0], ev.psi[0]), (u2, s2, ev.w[1], ev.psi[1])):
        if s.any():
            val, arg = _reverse(u, s, w, grid)
        else:
            val, arg = np.full(grid.shape, -np.inf), np.zeros(grid.shape, dtype=np.int64)
        cands.append(val - psi)
        args.append(arg)
    phase = np.where(cands[0] >= cands[1], 0, 1)
    p = np.where(phase == 0, cands[0], cands[1])
    K = (float(np.sum(np.where(s1, u1 * pair.rho1, 0.0)))
         + float(np.sum(np.where(s2, u2 * pair.rho2, 0.0))) - float(np.sum(p))) * ev.h2
    grads = []
    for k, rho in enumerate((pair.rho1, pair.rho2)):
        mine = (phase == k).astype(float)
        pulled = np.bincount(args[k].ravel(), weights=mine.ravel(),
                             minlength=grid.size).reshape(grid.shape)
        grads.append(np.where(rho > 0, rho - pulled, 0.0))
    return K, p, grads


def _back_step(ev: _Evaluator, state: DualState, precond, opts: BfmOptions, history) -> DualState:
    """Ascent on the source potentials with the pressure given by the reverse transform."""
    u1, u2 = state.phi1, state.phi2
    K, _, grads = _back_value(ev, u1, u2)
    d1, d2 = precond(grads[0]), precond(grads[1])
    step = 1.0
    for _ in range(opts.max_backtracks):
        K_try, p_try, _ = _back_value(ev, u1 + step * d1, u2 + step * d2)
        if _gains(K_try, K):
            J, t1, t2 = ev(p_try)
            if _gains(J, state.J):
                new = _state(ev, p_try, J, t1, t2, state.iterations, state.transport, history)
                _emit(opts, history, state.iterations, J, new.residual_l1, step, "back")
                return new
        step *= 0.5
    return state


# --------------------------------------------------------------- grid finisher

@numba.njit(cache=True)
def _auction(psi_rows, phase_w, xs, ys, prices, eps_schedule):
    """Forward auction for the assignment ``min sum_x C(x, sigma(x))``.

    ``C(x, y) = psi[phase(x)][y] + w[phase(x)] |x - y|^2`` with bidders ``x``
    and objects ``y`` both enumerating the cells. Prices only increase.
    """
    n = xs.shape[0]
    owner = np.empty(n, dtype=np.int64)
    assigned = np.empty(n, dtype=np.int64)
    queue = np.empty(n, dtype=np.int64)
    for eps in eps_schedule:
        for k in range(n):
            owner[k] = -1
            assigned[k] = -1
            queue[k] = k
        head = 0
        count = n
        while count > 0:
            x = queue[head]
            head = (head + 1) % n
            count -= 1
            best = np.inf
            second = np.inf
            by = -1
            ph = 0 if phase_w[x, 0] >= 0 else 1
            for y in range(n):
                dx = xs[x] - xs[y]
                dy = ys[x] - ys[y]
                c = psi_rows[x, y] + phase_w[x, 1] * (dx * dx + dy * dy) + prices[y]
                if c < best:
                    second = best
                    best = c
                    by = y
                elif c < second:
                    second = c
            if second == np.inf:
                second = best
            prices[by] += second - best + eps
            prev = owner[by]
            owner[by] = x
            assigned[x] = by
            if prev >= 0:
                assigned[prev] = -1
                queue[(head + count) % n] = prev
                count += 1
    return assigned


def _auction_finish(ev: _Evaluator, state: DualState, opts: BfmOptions, history) -> DualState:
    pair = ev.pair
    grid = pair.grid
    N = grid.size
    if N > 64 * 64:
        return state
    X, Y = grid.xy
    phase1 = (pair.rho1.ravel() > 0)
    psi_rows = np.where(phase1[:, None], ev.psi[0].ravel()[None, :], ev.psi[1].ravel()[None, :])
    phase_w = np.stack([np.where(phase1, 0.0, -1.0), np.where(phase1, ev.w[0], ev.w[1])], axis=1)
    span = float(np.ptp(psi_rows) + max(ev.w) * 2.0 + np.ptp(state.p)) + 1e-12
    eps_final = opts.auction_gap / (N * ev.h2)
    sched = []
    e = span / 10.0
    while e > eps_final:
        sched.append(e)
        e /= 6.0
    sched.append(eps_final)
    prices = state.p.ravel().astype(float).copy()
    assigned = _auction(np.ascontiguousarray(psi_rows), phase_w, X.ravel().copy(), Y.ravel().copy(),
                        prices, np.array(sched))
    p = prices.reshape(grid.shape)
    J, t1, t2 = ev(p)
    # the auction certifies J >= optimum - auction_gap; within that it is at
    # least as good as the current state and its bijection balances the marginals
    if J < state.J - opts.auction_gap:
        return state
    new = _state(ev, p, J, t1, t2, state.iterations, state.transport, history)
    # the auction's assignment is an eps-argmin bijection; use it as the map
    T = assigned.reshape(grid.shape)
    ti, tj = np.divmod(T, grid.ny)
    Ypos = np.stack([(ti + 0.5) * grid.h, (tj + 0.5) * grid.h])
    m1 = pair.rho1 > 0
    new.T1 = np.where(m1, T, t1.argmin)
    new.T2 = np.where(~m1, T, t2.argmin)
    new.Y1 = np.where(m1[None], Ypos, t1.Y)
    new.Y2 = np.where(~m1[None], Ypos, t2.Y)
    new.residual = pushforward(pair.rho1, new.T1) + pushforward(pair.rho2, new.T2) - 1.0
    _emit(opts, history, state.iterations, J, new.residual_l1, eps_final, "auction")
    return new


# ------------------------------------------------------------------- recovery

def recover_velocity(state: DualState, i: int) -> np.ndarray:
    """``v_i = (T_i(x) - x) / tau`` on the support of phase ``i``, zero elsewhere."""
    if i not in (1, 2):
        raise ValueError("phase index must be 1 or 2")
    X, Y = state.grid.xy
    Yt = state.Y1 if i == 1 else state.Y2
    rho = state.rho1 if i == 1 else state.rho2
    v = np.stack([Yt[0] - X, Yt[1] - Y]) / state.tau
    return np.where(rho[None] > 0, v, 0.0)


def recover_pressure(state: DualState) -> np.ndarray:
    """Pressure with the gauge fixed to zero mean over the domain."""
    return state.p - state.p.mean()
