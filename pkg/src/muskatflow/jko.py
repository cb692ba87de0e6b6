"""Linearised minimising-movements step and the outer time loop.

One step: linearise the heat content about the current phases, solve the
dual pressure problem, recover per-phase velocities, move the level set and
re-threshold it to the fixed masses.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .bfm import BfmOptions, DualState, NonConvergence, recover_pressure, recover_velocity, solve_dual
from .fields import Grid, PhasePair, integrate, tv_perimeter
from .kernels import HeatKernel, hc_first_variation, heat_content_arrays
from .levelset import advect, redistance, signed_distance, threshold_with_mass

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Potential:
    """Potential depending on height only, piecewise linear in ``y``.

    ``knots`` are ``(y, value)`` pairs with non-decreasing ``y``. A repeated
    ``y`` encodes a jump: the first value applies from below, the second
    from above. Outside the knot range the end values are held.
    """

    knots: tuple[tuple[float, float], ...] = ((0.0, 0.0), (1.0, 0.0))

    def __post_init__(self):
        ys = [k[0] for k in self.knots]
        if len(ys) < 2 or any(b < a for a, b in zip(ys, ys[1:])):
            raise ValueError("potential knots need at least two points with non-decreasing y")
        if any(not (math.isfinite(a) and math.isfinite(b)) for a, b in self.knots):
            raise ValueError("potential knots must be finite")

    def __call__(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        ky = np.array([k[0] for k in self.knots])
        kv = np.array([k[1] for k in self.knots])
        # segment s spans knots s, s+1; a y sitting on a jump takes the lower branch
        s = np.clip(np.searchsorted(ky, y, side="left") - 1, 0, len(ky) - 2)
        y0, y1 = ky[s], ky[s + 1]
        span = np.where(y1 > y0, y1 - y0, 1.0)
        t = np.clip((y - y0) / span, 0.0, 1.0)
        return kv[s] + t * (kv[s + 1] - kv[s])

    def on(self, grid: Grid) -> np.ndarray:
        return self(grid.xy[1])

    @property
    def is_zero(self) -> bool:
        return all(v == 0.0 for _, v in self.knots)

    @classmethod
    def zero(cls) -> "Potential":
        return cls()

    @classmethod
    def linear(cls, slope: float) -> "Potential":
        return cls(((0.0, 0.0), (1.0, float(slope))))


def gravity(w1: float, w2: float, orientation: str = "sink") -> tuple[Potential, Potential]:
    """Height potentials ``w_i y`` ("sink") or ``-w_i y`` ("literal").

    With ``w1 > w2`` and "sink" the first phase settles at ``y = 0``; with
    "literal" it settles at ``y = 1``. The two only differ by a reflection
    of the domain.
    """
    if orientation == "sink":
        s = 1.0
    elif orientation == "literal":
        s = -1.0
    else:
        raise ValueError("orientation must be 'sink' or 'literal'")
    return Potential.linear(s * w1), Potential.linear(s * w2)


def ripping() -> tuple[Potential, Potential]:
    """Tent potential pulling phase 1 to both walls, harder towards ``y = 0``.

    ``1/2 - |y - 1/2|`` above mid-height and ``5/4`` of that below; the two
    branches do not meet at ``y = 1/2``.
    """
    p1 = Potential(((0.0, 0.0), (0.5, 0.625), (0.5, 0.5), (1.0, 0.0)))
    return p1, Potential.zero()


@dataclass
class StepConfig:
    tau: float = 1e-3
    sigma: float = 0.15
    eps: float | None = None          # None: 16 h^2
    b1: float = 1.0
    b2: float = 1.0
    phi1: Potential = field(default_factory=Potential.zero)
    phi2: Potential = field(default_factory=Potential.zero)
    bfm: BfmOptions = field(default_factory=BfmOptions)
    cfl: float = 0.5
    accept_res: float = 1e-2          # accept a non-converged dual solve below this L1 residual
    tol_dissip: float | None = None   # None: 1e-6 + 2 h sigma

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")
        if self.eps is not None and not self.eps > 0:
            raise ValueError("eps must be positive")
        if not 0 < self.cfl <= 1:
            raise ValueError("cfl must lie in (0, 1]")

    def kernel(self, grid: Grid) -> HeatKernel:
        return HeatKernel.default(grid, self.sigma, self.eps)

    def potentials(self, grid: Grid) -> tuple[np.ndarray, np.ndarray]:
        return self.phi1.on(grid), self.phi2.on(grid)

    def dissipation_tol(self, grid: Grid) -> float:
        return self.tol_dissip if self.tol_dissip is not None else 1e-6 + 2 * grid.h * self.sigma


@dataclass
class EnergyReport:
    step: int
    time: float
    hc: float
    potential: float
    total: float
    w2sq_1: float
    w2sq_2: float
    dissipation_slack: float
    tv_perimeter: float
    p_min: float
    p_max: float
    bfm_iters: int
    residual: float
    h: float = 0.0
    mass1: float = 0.0
    mass2: float = 0.0

    CSV_COLUMNS = ("step", "time", "HC", "potential", "total", "W2sq_1", "W2sq_2",
                   "dissipation_slack", "tv_perimeter", "p_min", "p_max", "bfm_iters", "residual")

    def csv_row(self) -> list:
        return [self.step, self.time, self.hc, self.potential, self.total, self.w2sq_1,
                self.w2sq_2, self.dissipation_slack, self.tv_perimeter, self.p_min,
                self.p_max, self.bfm_iters, self.residual]

    def finite(self) -> bool:
        return all(math.isfinite(float(x)) for x in self.csv_row())


def potential_energy(pair: PhasePair, phi1: np.ndarray, phi2: np.ndarray) -> float:
    return integrate(np.asarray(phi1) * pair.rho1 + np.asarray(phi2) * pair.rho2, pair.grid)


def w2_estimate(rho: np.ndarray, v: np.ndarray, tau: float, grid: Grid) -> float:
    """One-step surrogate ``tau^2 h^2 sum |v|^2 rho`` of the squared distance moved."""
    v = np.asarray(v, dtype=float)
    return tau * tau * integrate((v[0] ** 2 + v[1] ** 2) * np.asarray(rho), grid)


def total_energy(pair: PhasePair, kernel: HeatKernel, phi1, phi2) -> tuple[float, float]:
    hc = heat_content_arrays(pair.rho1, pair.rho2, kernel)
    return hc, potential_energy(pair, phi1, phi2)


@dataclass
class StepResult:
    pair: PhasePair
    dual: DualState
    report: EnergyReport
    levelset: np.ndarray
    velocity: np.ndarray


def combined_velocity(dual: DualState) -> np.ndarray:
    """``v_1 rho_1 + v_2 rho_2``; both maps are defined on every cell of their phase."""
    return recover_velocity(dual, 1) * dual.rho1 + recover_velocity(dual, 2) * dual.rho2


def jko_step(pair: PhasePair, cfg: StepConfig, levelset: np.ndarray | None = None,
             p0: np.ndarray | None = None, step: int = 1) -> StepResult:
    """Advance the phases by one linearised step of length ``cfg.tau``.

    ``levelset`` is the carried signed distance (built from ``pair.rho1`` when
    omitted); ``p0`` warm-starts the dual solve.
    """
    grid = pair.grid
    if not pair.characteristic:
        raise ValueError("jko_step needs characteristic phases")
    kernel = cfg.kernel(grid)
    Phi1, Phi2 = cfg.potentials(grid)
    pair = replace(pair, b1=cfg.b1, b2=cfg.b2) if (pair.b1, pair.b2) != (cfg.b1, cfg.b2) else pair
    psi1 = hc_first_variation(pair.rho2, kernel) + Phi1
    psi2 = hc_first_variation(pair.rho1, kernel) + Phi2
    try:
        dual = solve_dual(pair, psi1, psi2, cfg.tau, cfg.bfm, p0=p0)
    except NonConvergence as exc:
        if exc.residual > cfg.accept_res:
            raise
        log.warning("step %d: accepting dual solve with L1 residual %.2e", step, exc.residual)
        dual = exc.state
    v1 = recover_velocity(dual, 1)
    v2 = recover_velocity(dual, 2)
    v = v1 * pair.rho1 + v2 * pair.rho2
    phi = signed_distance(pair.rho1, grid) if levelset is None else levelset
    moved = advect(phi, v, cfg.tau, grid, cfg.cfl)
    rho1, c = threshold_with_mass(moved, pair.mass1, grid)
    new_phi = redistance(moved - c, grid)
    new = pair.with_phase1(rho1)

    hc0, pot0 = total_energy(pair, kernel, Phi1, Phi2)
    hc1, pot1 = total_energy(new, kernel, Phi1, Phi2)
    w1 = w2_estimate(pair.rho1, v1, cfg.tau, grid)
    w2 = w2_estimate(pair.rho2, v2, cfg.tau, grid)
    slack = (hc0 + pot0) - (hc1 + pot1) - (pair.b1 * w1 + pair.b2 * w2) / (2 * cfg.tau)
    tol = cfg.dissipation_tol(grid)
    if slack < -tol:
        log.warning("step %d: dissipation slack %.3e below -%.3e (E %.6g -> %.6g, W2 %.3e %.3e)",
                    step, slack, tol, hc0 + pot0, hc1 + pot1, w1, w2)
    p = recover_pressure(dual)
    report = EnergyReport(step, step * cfg.tau, hc1, pot1, hc1 + pot1, w1, w2, slack,
                          tv_perimeter(rho1, grid), float(p.min()), float(p.max()),
                          dual.iterations, dual.residual_l1, grid.h, pair.mass1, pair.mass2)
    return StepResult(new, dual, report, new_phi, v)


@dataclass
class FlowResult:
    pair: PhasePair
    history: list
    levelset: np.ndarray | None = None
    stationary_at: int | None = None
    initial: EnergyReport | None = None


def initial_report(pair: PhasePair, cfg: StepConfig) -> EnergyReport:
    grid = pair.grid
    Phi1, Phi2 = cfg.potentials(grid)
    hc, pot = total_energy(pair, cfg.kernel(grid), Phi1, Phi2)
    return EnergyReport(0, 0.0, hc, pot, hc + pot, 0.0, 0.0, 0.0, tv_perimeter(pair.rho1, grid),
                        0.0, 0.0, 0, 0.0, grid.h, pair.mass1, pair.mass2)


def run_flow(pair0: PhasePair, cfg: StepConfig, n_steps: int, callbacks=(),
             stop_on_stationary: bool = True, window: int = 10) -> FlowResult:
    """Iterate :func:`jko_step`; each callback receives the :class:`StepResult`."""
    from .diagnostics import stationarity

    if n_steps < 0:
        raise ValueError("n_steps must be non-negative")
    pair = pair0
    history: list = []
    res = FlowResult(pair0, history, None, None, initial_report(pair0, cfg))
    if n_steps == 0:
        return res
    phi = signed_distance(pair0.rho1, pair0.grid)
    p = None
    for n in range(1, n_steps + 1):
        out = jko_step(pair, cfg, levelset=phi, p0=p, step=n)
        pair, phi, p = out.pair, out.levelset, out.dual.p
        history.append(out.report)
        for cb in callbacks:
            cb(out)
        if stop_on_stationary and len(history) >= window and stationarity(history, window):
            res.stationary_at = n
            break
    res.pair = pair
    res.levelset = phi
    return res
