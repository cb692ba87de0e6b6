"""Command-line driver: configuration files, presets and run outputs.

Config files are ``key = value`` lines with ``#`` comments. A ``preset``
key loads a full experiment; any other key overrides it.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import math
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import bfm as bfm_mod
from .bfm import BfmOptions, NonConvergence
from .diagnostics import (count_components, mixed_measure_check, probe_record, shape_classify,
                          stationarity)
from .fields import Grid, PhasePair, dump_raw, load_raw
from .jko import EnergyReport, Potential, StepConfig, gravity, initial_report, ripping, run_flow
from .kernels import HeatKernel, gaussian_blur, heat_content_arrays

log = logging.getLogger("muskatflow")

THREADS_ENV = "MUSKATFLOW_THREADS"


class ConfigError(ValueError):
    def __init__(self, key: str, msg: str = ""):
        self.key = key
        super().__init__(f"{key}: {msg}" if msg else key)


class UnknownKey(ConfigError):
    pass


class BadValue(ConfigError):
    pass


class MissingRequired(ConfigError):
    pass


@dataclass
class SimConfig:
    preset: str = "none"
    nx: int = 128
    tau: float = 1e-3
    eps: float | None = None            # None means 16 h^2 ("auto")
    sigma: float = 0.15
    b1: float = 1.0
    b2: float = 1.0
    n_steps: int = 400
    potential: str = "none"             # none | gravity | ripping | table
    w1: float = 5.0
    w2: float = 1.0
    gravity_orientation: str = "sink"   # sink | literal
    table1: tuple = ((0.0, 0.0), (1.0, 0.0))
    table2: tuple = ((0.0, 0.0), (1.0, 0.0))
    shape: str = "square"               # square | disc | halfplane | raw
    center: tuple = (0.5, 0.5)
    side: float = 0.2
    radius: float = 0.1
    axis: str = "x"
    level: float = 0.5
    raw_path: str = ""
    out: str = "out"
    frame_stride: int = 10
    tol_res: float = 1e-6               # in practice the solve runs until it stalls
    max_iters: int = 500
    accept_res: float = 1e-2
    cfl: float = 0.5
    stop_on_stationary: bool = True
    seed: int = 0

    @property
    def grid(self) -> Grid:
        return Grid(self.nx)

    def potentials(self) -> tuple[Potential, Potential]:
        if self.potential == "gravity":
            return gravity(self.w1, self.w2, self.gravity_orientation)
        if self.potential == "ripping":
            return ripping()
        if self.potential == "table":
            return Potential(self.table1), Potential(self.table2)
        return Potential.zero(), Potential.zero()

    def step_config(self) -> StepConfig:
        p1, p2 = self.potentials()
        return StepConfig(tau=self.tau, sigma=self.sigma, eps=self.eps, b1=self.b1, b2=self.b2,
                          phi1=p1, phi2=p2,
                          bfm=BfmOptions(max_iters=self.max_iters, tol_res=self.tol_res),
                          cfl=self.cfl, accept_res=self.accept_res)

    def initial_rho1(self) -> np.ndarray:
        grid = self.grid
        X, Y = grid.xy
        cx, cy = self.center
        if self.shape == "square":
            rho = (np.abs(X - cx) < self.side / 2) & (np.abs(Y - cy) < self.side / 2)
        elif self.shape == "disc":
            rho = (X - cx) ** 2 + (Y - cy) ** 2 < self.radius**2
        elif self.shape == "halfplane":
            rho = (X if self.axis == "x" else Y) < self.level
        else:
            rho = load_raw(self.raw_path)
            if rho.shape != grid.shape:
                raise BadValue("raw_path", f"field shape {rho.shape} does not match nx={self.nx}")
            rho = rho > 0.5
        return rho.astype(float)

    def initial_pair(self) -> PhasePair:
        rho = self.initial_rho1()
        m = rho.mean()
        if not 0 < m < 1:
            raise BadValue("shape", f"initial phase-1 mass {m:g} not in (0, 1)")
        return PhasePair.from_phase1(self.grid, rho, self.b1, self.b2)


PRESETS = {
    # contact lines pin on landing; a shorter fall leaves the angle nearer 90 degrees
    "fig1": dict(potential="gravity", w1=5.0, w2=1.0, shape="square", center=(0.5, 0.3),
                 side=0.2, n_steps=800, nx=128),
    # the levelling of the last bump is slower than the stationarity test
    "fig2": dict(potential="gravity", w1=5.0, w2=1.0, shape="square", center=(0.5, 0.35),
                 side=0.5, n_steps=600, nx=128, stop_on_stationary=False),
    # a thin column on the left wall; centred drops either stay round or form a stable column
    "fig3": dict(potential="ripping", shape="halfplane", axis="x", level=0.05,
                 n_steps=300, nx=128, stop_on_stationary=False),
}

_FIELDS = {f.name: f for f in dataclasses.fields(SimConfig)}
_CHOICES = {
    "preset": ("none",) + tuple(PRESETS),
    "potential": ("none", "gravity", "ripping", "table"),
    "gravity_orientation": ("sink", "literal"),
    "shape": ("square", "disc", "halfplane", "raw"),
    "axis": ("x", "y"),
}
_POSITIVE = ("nx", "tau", "sigma", "b1", "b2", "side", "radius", "frame_stride", "tol_res",
             "max_iters", "accept_res", "cfl")
_NONNEG = ("n_steps", "w1", "w2", "seed")


def _parse_bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _parse_pair(s: str) -> tuple:
    parts = [float(x) for x in s.replace(",", " ").split()]
    if len(parts) != 2:
        raise ValueError("expected two numbers")
    return tuple(parts)


def _parse_table(s: str) -> tuple:
    knots = []
    for item in s.split(";"):
        if item.strip():
            y, v = item.split(":")
            knots.append((float(y), float(v)))
    Potential(tuple(knots))
    return tuple(knots)


def _convert(key: str, raw: str):
    f = _FIELDS[key]
    s = raw.strip()
    try:
        if key == "eps":
            return None if s.lower() == "auto" else float(s)
        if key in ("center",):
            return _parse_pair(s)
        if key in ("table1", "table2"):
            return _parse_table(s)
        if f.type in ("int", int):
            v = float(s)
            if v != int(v):
                raise ValueError("expected an integer")
            return int(v)
        if f.type in ("float", float):
            return float(s)
        if f.type in ("bool", bool):
            return _parse_bool(s)
        return s
    except ValueError as exc:
        raise BadValue(key, str(exc)) from None


def _validate(cfg: SimConfig) -> None:
    for k in _POSITIVE:
        v = getattr(cfg, k)
        if not (isinstance(v, (int, float)) and math.isfinite(v) and v > 0):
            raise BadValue(k, "must be positive")
    for k in _NONNEG:
        v = getattr(cfg, k)
        if not (math.isfinite(v) and v >= 0):
            raise BadValue(k, "must be non-negative")
    if cfg.eps is not None and not (math.isfinite(cfg.eps) and cfg.eps > 0):
        raise BadValue("eps", "must be positive or auto")
    for k, allowed in _CHOICES.items():
        if getattr(cfg, k) not in allowed:
            raise BadValue(k, f"must be one of {', '.join(allowed)}")
    if cfg.nx < 4:
        raise BadValue("nx", "must be at least 4")
    if cfg.cfl > 1:
        raise BadValue("cfl", "must be at most 1")
    if cfg.eps is not None and cfg.eps < (1.0 / cfg.nx) ** 2:
        raise BadValue("eps", "below h^2")
    if cfg.shape == "raw" and not cfg.raw_path:
        raise MissingRequired("raw_path")
    if cfg.shape != "raw":
        m = cfg.initial_rho1().mean()
        if not 0 < m < 1:
            raise BadValue("shape", f"initial phase-1 mass {m:g} not in (0, 1)")


def parse_config(text: str) -> SimConfig:
    """Parse ``key = value`` text into a validated :class:`SimConfig`."""
    items: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise BadValue(line.split()[0], f"line {lineno} is not 'key = value'")
        k, v = (s.strip() for s in line.split("=", 1))
        if k not in _FIELDS:
            raise UnknownKey(k)
        items[k] = v
    preset = items.get("preset", "none").strip()
    if preset not in _CHOICES["preset"]:
        raise BadValue("preset", f"must be one of {', '.join(_CHOICES['preset'])}")
    if preset == "none":
        for k in ("n_steps", "shape"):
            if k not in items:
                raise MissingRequired(k)
    values = dict(PRESETS.get(preset, {}))
    values["preset"] = preset
    for k, v in items.items():
        if k != "preset":
            values[k] = _convert(k, v)
    cfg = SimConfig(**values)
    _validate(cfg)
    return cfg


def _fmt(v) -> str:
    if v is None:
        return "auto"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple) and v and isinstance(v[0], tuple):
        return "; ".join(f"{y!r}:{w!r}" for y, w in v)
    if isinstance(v, tuple):
        return ", ".join(repr(float(x)) for x in v)
    return str(v)


def serialize(cfg: SimConfig) -> str:
    lines = [f"{k} = {_fmt(getattr(cfg, k))}" for k in _FIELDS if not (k == "raw_path" and not cfg.raw_path)]
    return "\n".join(lines) + "\n"


# ------------------------------------------------------------------ outputs

def write_pgm(path: Path, rho1: np.ndarray) -> None:
    """8-bit binary PGM; image rows run from y = 1 at the top to y = 0."""
    img = np.clip(np.rint(np.asarray(rho1) * 255), 0, 255).astype(np.uint8).T[::-1]
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(img.tobytes())


def read_pgm(path: Path) -> np.ndarray:
    """Inverse of :func:`write_pgm`, returning ``rho1`` in [0, 1]."""
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    img = np.frombuffer(parts[4][: w * h], dtype=np.uint8).reshape(h, w)
    return img[::-1].T.astype(float) / maxval


def _fmt_csv(v) -> str:
    return str(v) if isinstance(v, (int, np.integer)) else repr(float(v))


def _frame_record(step: int, pair: PhasePair, kernel: HeatKernel) -> str:
    blurred = gaussian_blur(pair.rho1, kernel)
    hc = heat_content_arrays(blurred, 1.0 - blurred, kernel)
    checks = {}
    ok = True
    for a in (0.1, 0.25, 0.4):
        m, b, p = mixed_measure_check(blurred, a, kernel.eps, kernel.sigma, hc)
        checks[str(a)] = {"measure": m, "bound": b, "pass": p}
        ok &= p
    h2 = pair.grid.h**2
    metrics = {"step": step, "components": count_components(pair.rho1),
               "mass1": float(pair.rho1.sum() * h2), "characteristic": pair.characteristic,
               "mixed_measure": checks}
    return probe_record("frame", {"step": step, "rho1": pair.rho1}, metrics, ok and pair.characteristic)


def run(cfg: SimConfig) -> int:
    """Run a simulation and write frames, energy CSV, final dump and diagnostics."""
    out = Path(cfg.out)
    frames = out / "frames"
    frames.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(serialize(cfg))
    grid = cfg.grid
    step_cfg = cfg.step_config()
    kernel = step_cfg.kernel(grid)
    pair0 = cfg.initial_pair()
    with open(out / "diagnostics.jsonl", "w") as diag, \
            open(out / "energy.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(EnergyReport.CSV_COLUMNS)
        writer.writerow([_fmt_csv(x) for x in initial_report(pair0, step_cfg).csv_row()])
        write_pgm(frames / "frame_00000.pgm", pair0.rho1)
        diag.write(_frame_record(0, pair0, kernel) + "\n")
        last = {"step": 0}

        def on_step(res):
            r = res.report
            writer.writerow([_fmt_csv(x) for x in r.csv_row()])
            if r.step % cfg.frame_stride == 0:
                write_pgm(frames / f"frame_{r.step:05d}.pgm", res.pair.rho1)
                diag.write(_frame_record(r.step, res.pair, kernel) + "\n")
            last["step"] = r.step

        t0 = time.time()
        try:
            flow = run_flow(pair0, step_cfg, cfg.n_steps, [on_step], cfg.stop_on_stationary)
        except NonConvergence as exc:
            log.error("dual solve failed at step %d: %s", last["step"] + 1, exc)
            diag.write(probe_record("failure", {"step": last["step"] + 1},
                                    {"error": str(exc)}, False) + "\n")
            return 1
        final = flow.pair
        if last["step"] % cfg.frame_stride != 0:
            write_pgm(frames / f"frame_{last['step']:05d}.pgm", final.rho1)
            diag.write(_frame_record(last["step"], final, kernel) + "\n")
        dump_raw(final.rho1, out / "final_rho1.raw")
        try:
            rep = shape_classify(final.rho1, grid)
            diag.write(probe_record("shape_classify", {"rho1": final.rho1}, rep.to_dict(), True) + "\n")
        except ValueError as exc:
            diag.write(probe_record("shape_classify", {"rho1": final.rho1},
                                    {"error": str(exc)}, False) + "\n")
        hist = flow.history
        summary = {"steps": len(hist), "stationary_at": flow.stationary_at,
                   "stationary": bool(len(hist) >= 2 and stationarity(hist)),
                   "seconds": time.time() - t0,
                   "min_slack": min((r.dissipation_slack for r in hist), default=0.0),
                   "dissipation_tol": step_cfg.dissipation_tol(grid)}
        diag.write(probe_record("run_summary", serialize(cfg), summary,
                                summary["min_slack"] >= -summary["dissipation_tol"]) + "\n")
    log.info("finished %d steps in %.1fs (stationary at %s)", len(hist), summary["seconds"],
             flow.stationary_at)
    return 0


# ------------------------------------------------------------------- probes

def probe(name: str, cfg: SimConfig) -> tuple[bool, list[str]]:
    """Run one diagnostics operation on the configured initial state."""
    from .diagnostics import concavity_probe

    grid = cfg.grid
    kernel = cfg.step_config().kernel(grid)
    pair = cfg.initial_pair()
    lines = []
    ok = True
    if name == "shape":
        rep = shape_classify(pair.rho1, grid)
        lines.append(probe_record("shape_classify", {"rho1": pair.rho1}, rep.to_dict(), True))
    elif name == "mixed_measure":
        blurred = gaussian_blur(pair.rho1, kernel)
        hc = heat_content_arrays(blurred, 1 - blurred, kernel)
        for a in (0.1, 0.25, 0.4):
            m, b, p = mixed_measure_check(blurred, a, kernel.eps, kernel.sigma, hc)
            ok &= p
            lines.append(probe_record("mixed_measure", {"rho1": pair.rho1, "alpha": a},
                                      {"alpha": a, "measure": m, "bound": b}, p))
    elif name == "concavity":
        rng = np.random.default_rng(cfg.seed)
        other = PhasePair.from_phase1(grid, rng.random(grid.shape))
        rep = concavity_probe(pair, other, np.linspace(0, 1, 11), kernel)
        ok = rep.passed
        lines.append(probe_record("concavity", {"seed": cfg.seed, "rho1": pair.rho1},
                                  dataclasses.asdict(rep), rep.passed))
    elif name == "energy":
        r = initial_report(pair, cfg.step_config())
        lines.append(probe_record("energy", {"rho1": pair.rho1}, dataclasses.asdict(r), r.finite()))
    else:
        raise ValueError(f"unknown probe {name!r}; choose shape, mixed_measure, concavity, energy")
    return ok, lines


# ------------------------------------------------------------- oracle check

def oracle_check(max_size: int = 16, seed: int = 0, out=sys.stdout) -> bool:
    """Cross-validate the fast paths against the reference computations."""
    from .bfm import dual_value, solve_dual
    from .ctransform import quadratic_ctransform
    from .oracle import MAX_HC_SIDE, ctransform_scan, hc_direct, linearized_primal_lp
    from .kernels import heat_content

    rng = np.random.default_rng(seed)
    all_ok = True

    def report(name, ok, detail):
        nonlocal all_ok
        all_ok &= ok
        out.write(f"{'PASS' if ok else 'FAIL'} {name}: {detail}\n")

    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(4, max(4, max_size) + 1))
        g = Grid(n)
        f = rng.normal(size=g.shape)
        w = float(rng.uniform(0.1, 50.0))
        ct = quadratic_ctransform(f, w, g)
        v, _ = ctransform_scan(f, w, g)
        worst = max(worst, float(np.abs(ct.values - v).max()))
    report("ctransform", worst <= 1e-12, f"max |fast - scan| = {worst:.2e} over 100 fields")

    side = min(6, max_size)
    worst = 0.0
    for _ in range(25):
        g = Grid(side)
        rho1 = (rng.random(g.shape) < 0.5).astype(float)
        if rho1.sum() in (0, g.size):
            rho1.flat[0] = 1 - rho1.flat[0]
        pair = PhasePair.from_phase1(g, rho1, float(rng.uniform(0.5, 2)), float(rng.uniform(0.5, 2)))
        psi1, psi2 = rng.normal(size=g.shape), rng.normal(size=g.shape)
        tau = float(rng.uniform(0.01, 0.2))
        st = solve_dual(pair, psi1, psi2, tau, BfmOptions(transport="grid", max_iters=200))
        lp = linearized_primal_lp(pair, psi1, psi2, tau).value
        worst = max(worst, abs(st.J - lp), abs(dual_value(st.p, psi1, psi2, pair, tau) - st.J))
    report("duality", worst <= 1e-6, f"max |dual - primal| = {worst:.2e} over 25 {side}x{side} instances")

    n = min(MAX_HC_SIDE, max(8, max_size))
    g = Grid(n)
    X, Y = g.xy
    rho1 = ((X - 0.5) ** 2 + (Y - 0.5) ** 2 < 0.09).astype(float)
    pair = PhasePair.from_phase1(g, rho1)
    k = HeatKernel.default(g, 0.15, 4 * g.h**2)
    a, b = heat_content(pair, k), hc_direct(pair.rho1, pair.rho2, g, k.eps, k.sigma)
    rel = abs(a - b) / abs(b)
    report("heat_content", rel <= 1e-3, f"stencil vs direct sum rel. diff {rel:.2e} at {n}x{n}")
    return all_ok


# --------------------------------------------------------------------- main

def _apply_threads() -> None:
    n = os.environ.get(THREADS_ENV)
    if not n:
        return
    import numba

    k = max(1, int(n))
    numba.set_num_threads(min(k, numba.config.NUMBA_NUM_THREADS))
    bfm_mod.FFT_WORKERS = k


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="muskatflow", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True)
    r = sub.add_parser("run", help="run a simulation from a config file")
    r.add_argument("config")
    p = sub.add_parser("preset", help="run one of the built-in experiments")
    p.add_argument("name", choices=sorted(PRESETS))
    p.add_argument("--nx", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--out")
    q = sub.add_parser("probe", help="run a diagnostics probe on a config's initial state")
    q.add_argument("name", choices=("shape", "mixed_measure", "concavity", "energy"))
    q.add_argument("config")
    o = sub.add_parser("oracle-check", help="cross-validate fast solvers against reference ones")
    o.add_argument("--max-size", type=int, default=16)
    o.add_argument("--seed", type=int, default=0)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    _apply_threads()
    try:
        if args.cmd == "run":
            return run(parse_config(Path(args.config).read_text()))
        if args.cmd == "preset":
            text = f"preset = {args.name}\n"
            if args.nx:
                text += f"nx = {args.nx}\n"
            if args.steps is not None:
                text += f"n_steps = {args.steps}\n"
            text += f"out = {args.out or 'out_' + args.name}\n"
            return run(parse_config(text))
        if args.cmd == "probe":
            ok, lines = probe(args.name, parse_config(Path(args.config).read_text()))
            print("\n".join(lines))
            return 0 if ok else 1
        if args.cmd == "oracle-check":
            return 0 if oracle_check(args.max_size, args.seed) else 1
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    return 2


if __name__ == "__main__":
    sys.exit(main())
