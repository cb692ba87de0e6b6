"""Property probes and equilibrium-shape classification.

Shape thresholds (fit residual below ``2h``, contact angles within a few
degrees) are conventions of this package, not derived quantities.
"""
from __future__ import annotations

import enum
import hashlib
import json
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage
from skimage.measure import CircleModel, find_contours

from .fields import Grid, PhasePair
from .kernels import HeatKernel, heat_content_arrays
from .levelset import EmptyPhase, signed_distance

CONCAVITY_TOL = 1e-10


def _grid_for(rho: np.ndarray) -> Grid:
    return Grid(rho.shape[0], rho.shape[1])


# ------------------------------------------------------------ mixed measure

def mixed_measure_check(rho: np.ndarray, alpha: float, eps: float, sigma: float,
                        hc_value: float) -> tuple[float, float, bool]:
    """Area where ``alpha <= rho <= 1 - alpha`` against ``3 sqrt(eps) HC / (sigma sqrt(2 pi) a(1-a))``."""
    if not 0 < alpha < 0.5:
        raise ValueError("alpha must lie in (0, 1/2)")
    if not sigma > 0 or not eps > 0:
        raise ValueError("sigma and eps must be positive")
    rho = np.asarray(rho, dtype=float)
    h = _grid_for(rho).h
    measure = float(np.count_nonzero((rho >= alpha) & (rho <= 1 - alpha))) * h * h
    bound = 3 * math.sqrt(eps) * hc_value / (sigma * math.sqrt(2 * math.pi) * alpha * (1 - alpha))
    return measure, bound, measure <= bound


# ---------------------------------------------------------------- concavity

@dataclass
class ConcavityReport:
    t: list
    slack: list           # HC on the segment minus the chord
    min_slack: float
    strict_margin: float  # smallest slack at interior t
    differ_fraction: float
    passed: bool


def concavity_probe(pair_a: PhasePair, pair_b: PhasePair, t_samples, kernel: HeatKernel) -> ConcavityReport:
    """Heat content along the segment between two pairs versus the chord."""
    for pr in (pair_a, pair_b):
        if not np.allclose(pr.rho1 + pr.rho2, 1.0, rtol=0, atol=1e-12):
            raise ValueError("pairs must satisfy rho1 + rho2 = 1")
    ha = heat_content_arrays(pair_a.rho1, pair_a.rho2, kernel)
    hb = heat_content_arrays(pair_b.rho1, pair_b.rho2, kernel)
    ts, slack = [], []
    for t in t_samples:
        t = float(t)
        if not 0 <= t <= 1:
            raise ValueError("t samples must lie in [0, 1]")
        r1 = (1 - t) * pair_a.rho1 + t * pair_b.rho1
        hc = heat_content_arrays(r1, 1.0 - r1, kernel)
        ts.append(t)
        slack.append(hc - ((1 - t) * ha + t * hb))
    s = np.array(slack)
    interior = np.array([0 < t < 1 for t in ts])
    margin = float(s[interior].min()) if interior.any() else 0.0
    differ = float(np.mean(np.abs(pair_a.rho1 - pair_b.rho1) > 1e-12))
    return ConcavityReport(ts, slack, float(s.min()), margin, differ,
                           bool(s.min() >= -CONCAVITY_TOL))


# ----------------------------------------------------------------- shapes

class Shape(str, enum.Enum):
    HALF_DISC = "HalfDisc"
    STRIP = "Strip"
    CORNER_DROPS = "CornerDrops"
    PENDANT_DISC = "PendantDisc"
    OTHER = "Other"


@dataclass
class ShapeReport:
    shape: Shape
    residual: float                 # RMS distance of the interface to the chosen model
    contact_angle: float | None     # degrees, measured inside phase 1; mean over wall contacts
    components: int
    radius: float | None = None
    center: tuple | None = None
    contact_angles: list = field(default_factory=list)
    local_contact_angles: list = field(default_factory=list)
    residuals: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["shape"] = self.shape.value
        return d


def interface_curves(rho1: np.ndarray, grid: Grid) -> list[np.ndarray]:
    """Marching-squares polylines of the 0.5 level in physical coordinates."""
    return [(c + 0.5) * grid.h for c in find_contours(np.asarray(rho1, dtype=float), 0.5)]


def count_components(rho1: np.ndarray) -> int:
    _, n = ndimage.label(np.asarray(rho1) > 0.5)
    return int(n)


def _walls_at(p, h) -> set:
    """Walls within ``h`` of a curve end; only the nearest one(s) when several qualify."""
    dist = {"x0": p[0], "x1": 1 - p[0], "y0": p[1], "y1": 1 - p[1]}
    near = {w: d for w, d in dist.items() if d <= h}
    if not near:
        return set()
    dmin = min(near.values())
    return {w for w, d in near.items() if d <= dmin + 1e-9}


_WALL_DIR = {"x0": np.array([0.0, 1.0]), "x1": np.array([0.0, 1.0]),
             "y0": np.array([1.0, 0.0]), "y1": np.array([1.0, 0.0])}


def _sample(rho1, p, grid):
    # bilinear between cell centres, so that mirrored inputs sample mirrored values
    x = np.clip(p[0] / grid.h - 0.5, 0, grid.nx - 1)
    y = np.clip(p[1] / grid.h - 0.5, 0, grid.ny - 1)
    return float(ndimage.map_coordinates(rho1, [[x], [y]], order=1, mode="nearest")[0])


def _contact_angle(curve, at_start, wall, rho1, grid) -> float | None:
    """Angle between the interface and the wall, opening into phase 1."""
    pts = curve if at_start else curve[::-1]
    end = pts[0]
    near = pts[np.linalg.norm(pts - end, axis=1) <= 5 * grid.h]
    if len(near) < 3:
        return None
    centred = near - near.mean(axis=0)
    u = np.linalg.svd(centred, full_matrices=False)[2][0]
    if np.dot(u, near[-1] - near[0]) < 0:
        u = -u
    t = _WALL_DIR[wall]
    base = end
    ahead = _sample(rho1, base + 2 * grid.h * t, grid)
    behind = _sample(rho1, base - 2 * grid.h * t, grid)
    if abs(ahead - behind) < 1e-9:
        return None
    tp = t if ahead > behind else -t
    return math.degrees(math.acos(float(np.clip(np.dot(u, tp), -1.0, 1.0))))


def _fit_circle(pts):
    m = CircleModel()
    with warnings.catch_warnings():
        # collinear input (a straight interface) is reported as a failed fit
        warnings.simplefilter("ignore", UserWarning)
        ok = len(pts) >= 3 and m.estimate(pts)
    if not ok:
        return None, math.inf
    res = float(np.sqrt(np.mean(m.residuals(pts) ** 2)))
    return tuple(float(x) for x in m.params), res


def _fit_line(pts) -> tuple[float, float]:
    """RMS orthogonal residual of the total-least-squares line and the height spread."""
    c = pts - pts.mean(axis=0)
    s = np.linalg.svd(c, full_matrices=False)[1]
    return float(s[-1] / math.sqrt(len(pts))), float(np.std(pts[:, 1]))


def _wall_offset(wall: str, cx: float, cy: float) -> float:
    return {"x0": cx, "x1": 1 - cx, "y0": cy, "y1": 1 - cy}[wall]


def _phase1_inside(params, wall, rho1, grid) -> bool:
    """Whether phase 1 fills the circle, probed just off the wall below the centre."""
    cx, cy, r = params
    off = min(0.5 * r, 0.25)
    probe = {"x0": (off, cy), "x1": (1 - off, cy), "y0": (cx, off), "y1": (cx, 1 - off)}[wall]
    return _sample(rho1, np.clip(np.array(probe), 0, 1 - 1e-12), grid) > 0.5


def _circle_wall_angle(params, wall, rho1, grid) -> float:
    """Angle inside phase 1 at which a fitted circle meets a wall."""
    cx, cy, r = params
    d = _wall_offset(wall, cx, cy)
    theta = 90.0 + math.degrees(math.asin(float(np.clip(d / r, -1.0, 1.0))))
    return theta if _phase1_inside(params, wall, rho1, grid) else 180.0 - theta


def _line_wall_angle(pts, wall) -> float:
    u = np.linalg.svd(pts - pts.mean(axis=0), full_matrices=False)[2][0]
    return math.degrees(math.acos(min(1.0, abs(float(np.dot(u, _WALL_DIR[wall]))))))


def shape_classify(rho1: np.ndarray, grid: Grid | None = None) -> ShapeReport:
    """Classify the phase-1 region against the equilibrium templates.

    The reported contact angle is where the fitted model meets the wall; the
    polyline tangent right at the wall is kept as ``local_contact_angles``.
    """
    rho1 = np.asarray(rho1, dtype=float)
    grid = grid or _grid_for(rho1)
    inside = rho1 > 0.5
    if not inside.any() or inside.all():
        raise EmptyPhase("shape_classify needs both phases present")
    h = grid.h
    ncomp = count_components(rho1)
    curves = [c for c in interface_curves(rho1, grid) if len(c) >= 3]
    ends = []
    for c in curves:
        closed = np.allclose(c[0], c[-1])
        ends.append((set(), set()) if closed else (_walls_at(c[0], h), _walls_at(c[-1], h)))
    local = []
    for c, (w0, w1) in zip(curves, ends):
        for at_start, ws in ((True, w0), (False, w1)):
            for w in sorted(ws)[:1]:
                a = _contact_angle(c, at_start, w, rho1, grid)
                if a is not None:
                    local.append(a)

    # candidate -> (residual, extras, model contact angles)
    candidates: dict = {}
    if len(curves) == 1:
        c = curves[0]
        w0, w1 = ends[0]
        params, rc = _fit_circle(c)
        if w0 and w1 and (w0 & w1) and params is not None:
            wall = sorted(w0 & w1)[0]
            cx, cy, r = params
            if abs(_wall_offset(wall, cx, cy)) < max(2 * h, 0.25 * r) and \
                    _phase1_inside(params, wall, rho1, grid):
                ang = _circle_wall_angle(params, wall, rho1, grid)
                candidates[Shape.HALF_DISC] = (rc, {"radius": r, "center": (cx, cy)}, [ang, ang])
        if not (w0 or w1) and params is not None and \
                _sample(rho1, np.clip(np.array(params[:2]), 0, 1 - 1e-12), grid) > 0.5:
            cx, cy, r = params
            candidates[Shape.PENDANT_DISC] = (rc, {"radius": r, "center": (cx, cy)}, [])
        both = w0 | w1
        horizontal = {"x0", "x1"} <= both
        vertical = {"y0", "y1"} <= both
        if (horizontal or vertical) and not (w0 & w1):
            rl, spread = _fit_line(c)
            spread = spread if horizontal else float(np.std(c[:, 0]))
            if spread < 2 * h:
                walls = ("x0", "x1") if horizontal else ("y0", "y1")
                candidates[Shape.STRIP] = (rl, {"spread": spread},
                                           [_line_wall_angle(c, w) for w in walls])
    if curves and all(e[0] and e[1] and not (e[0] & e[1]) and len(e[0] | e[1]) == 2
                      and not ({"x0", "x1"} <= (e[0] | e[1]) or {"y0", "y1"} <= (e[0] | e[1]))
                      for e in ends):
        worst = 0.0
        angs = []
        for c, (w0, w1) in zip(curves, ends):
            params, rc = _fit_circle(c)
            if params is None:
                worst = math.inf
                break
            cx, cy, r = params
            corner = (0.0 if "x0" in w0 | w1 else 1.0, 0.0 if "y0" in w0 | w1 else 1.0)
            if math.hypot(cx - corner[0], cy - corner[1]) > max(2 * h, 0.25 * r) or \
                    _sample(rho1, np.clip(np.array(corner), 0, 1 - 1e-12), grid) < 0.5:
                worst = math.inf
                break
            worst = max(worst, rc)
            angs += [_circle_wall_angle(params, w, rho1, grid) for w in sorted(w0 | w1)]
        if math.isfinite(worst):
            candidates[Shape.CORNER_DROPS] = (worst, {}, angs)

    residuals = {k.value: v[0] for k, v in candidates.items()}
    best = min(candidates.items(), key=lambda kv: kv[1][0]) if candidates else None
    if best is None or best[1][0] >= 2 * h:
        angle = float(np.mean(local)) if local else None
        return ShapeReport(Shape.OTHER, best[1][0] if best else math.inf, angle, ncomp,
                           contact_angles=local, local_contact_angles=local, residuals=residuals)
    shape, (res, extra, angs) = best
    angle = float(np.mean(angs)) if angs else None
    return ShapeReport(shape, res, angle, ncomp, extra.get("radius"), extra.get("center"),
                       angs, local, residuals)


# ----------------------------------------------------------- pressure jump

@dataclass
class PressureJump:
    jump: float          # mean of p1 - p2 along the interface
    spread: float        # standard deviation along the interface
    const1: float        # level of p + psi_1 on phase 1
    const2: float
    samples: int


def interface_pressure_jump(p: np.ndarray, rho1: np.ndarray, psi1: np.ndarray, psi2: np.ndarray,
                            phi1: np.ndarray, phi2: np.ndarray, grid: Grid,
                            band: float = 0.0) -> PressureJump:
    """Jump ``p1 - p2`` of the phase pressures across the interface at rest.

    ``psi_i`` is the full first variation (surface term plus ``phi_i``). At rest
    ``p + psi_i = C_i`` on phase ``i``; far from the interface the surface term
    vanishes, so the phase pressure is ``C_i - phi_i``. The jump at an interface
    point ``x`` is ``(C1 - phi_1(x)) - (C2 - phi_2(x))``, sampled on the 0.5
    contour. ``C_i`` is the median over cells farther than ``band`` from it.
    """
    rho1 = np.asarray(rho1, dtype=float)
    d = signed_distance(rho1, grid)   # negative inside phase 1
    in1, in2 = d < -band, d > band
    if not in1.any() or not in2.any():
        raise EmptyPhase("no cells beyond the band in one of the phases")
    c1 = float(np.median((p + psi1)[in1]))
    c2 = float(np.median((p + psi2)[in2]))
    pts = np.concatenate(interface_curves(rho1, grid))
    idx = np.clip(np.rint(pts / grid.h - 0.5).astype(int), 0, [grid.nx - 1, grid.ny - 1])
    dphi = (phi1 - phi2)[idx[:, 0], idx[:, 1]]
    jumps = (c1 - c2) - dphi
    return PressureJump(float(jumps.mean()), float(jumps.std()), c1, c2, len(jumps))


# ------------------------------------------------------------- stationarity

def stationarity(history, window: int = 10) -> bool:
    """True when, for ``window`` consecutive steps, each phase moved ``W2 < (h/10) M``.

    ``W2`` is the square root of the per-step estimate. Works on any sequence
    of records with ``w2sq_1``, ``w2sq_2``, ``h``, ``mass1`` and ``mass2``.
    """
    if len(history) < 2:
        raise ValueError("stationarity needs at least two steps")
    if len(history) < window:
        return False
    for r in history[-window:]:
        if (math.sqrt(r.w2sq_1) >= 0.1 * r.h * r.mass1
                or math.sqrt(r.w2sq_2) >= 0.1 * r.h * r.mass2):
            return False
    return True


# ---------------------------------------------------------------- records

def _digest(inputs) -> str:
    hsh = hashlib.sha256()

    def feed(x):
        if isinstance(x, np.ndarray):
            hsh.update(str(x.shape).encode())
            hsh.update(np.ascontiguousarray(x, dtype=float).tobytes())
        elif isinstance(x, dict):
            for k in sorted(x):
                hsh.update(str(k).encode())
                feed(x[k])
        elif isinstance(x, (list, tuple)):
            for v in x:
                feed(v)
        else:
            hsh.update(repr(x).encode())

    feed(inputs)
    return hsh.hexdigest()[:16]


def _jsonable(x):
    if isinstance(x, enum.Enum):
        return x.value
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, float) and not math.isfinite(x):
        return str(x)
    return x


def probe_record(name: str, inputs, metrics: dict, passed: bool) -> str:
    """One JSON line: name, inputs digest, metrics and pass flag."""
    return json.dumps({"name": name, "inputs": _digest(inputs), "metrics": _jsonable(metrics),
                       "pass": bool(passed)}, sort_keys=True)
