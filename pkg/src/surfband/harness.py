"""Metrics, benchmark suites and result persistence.

Sphere benchmarks run on the unit sphere. A grid spacing of 0.06 there is the
same resolution as 0.03 on a shape normalized to a unit bounding box, which
is how the rest of the package measures spacing. Resolution tags change the
surface mesh (closest points, features and readout locations) while the
grid spacing stays fixed.
"""
from __future__ import annotations

import csv
import dataclasses
import logging
import math
import os
import sys
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .band import BoundarySpec, PlaneCut
from .baselines import (cotan_laplacian, cpm_solve_heat, cpm_solve_poisson,
                        fem_solve_dirichlet_steady, fem_solve_heat, fem_solve_poisson,
                        real_sph_harm, sphere_analytic)
from .geometry import (SPHERE_MODES, Surface, TriangleMesh, load_surface, normalize_shape,
                       sphere_mesh, spherical_cap_mesh, torus_mesh)
from .operator import OperatorParams, load_params
from .solver import SolveConfig, SolveReport, solve_heat, solve_poisson

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger(__name__)

RESOLUTIONS = {"coarse": 100, "medium": 1000, "fine": 10_000, "very fine": 100_000}
SOLVERS = ("sfem", "cpm", "ours")
PDES = ("poisson", "heat")
SPHERE_DX = 0.06


# ---------------------------------------------------------------------------
# metrics


class MetricError(ValueError):
    pass


@dataclass
class MetricReport:
    nmae: float
    nmaxe: float
    nrmse: float
    n_eval: int
    value_range: float

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


def metrics(pred, truth, value_range: Optional[float] = None) -> MetricReport:
    """Errors normalized by the range of ``truth`` (or an explicit range).

    The explicit range is for references that are constant, such as a
    steady state; callers then pass the range of the data that produced it.
    """
    pred = np.asarray(pred, dtype=float).ravel()
    truth = np.asarray(truth, dtype=float).ravel()
    if pred.shape != truth.shape:
        raise MetricError(f"{pred.size} predictions for {truth.size} reference values")
    if pred.size < 2:
        raise MetricError("need at least two values")
    if value_range is None:
        value_range = float(truth.max() - truth.min())
        if not value_range > 0:
            raise MetricError("reference is constant; pass value_range explicitly")
    elif not value_range > 0:
        raise MetricError("value_range must be positive")
    e = np.abs(pred - truth)
    nmae = float(e.mean() / value_range)
    nrmse = float(np.sqrt(np.mean(e * e)) / value_range)
    nmaxe = float(e.max() / value_range)
    # rounding can break the power-mean ordering in the last ulp
    nmae = min(nmae, nmaxe)
    nrmse = min(max(nrmse, nmae), nmaxe)
    return MetricReport(nmae, nmaxe, nrmse, int(pred.size), float(value_range))


def vertex_areas(mesh: TriangleMesh) -> np.ndarray:
    a = np.zeros(len(mesh.vertices))
    fa = mesh.face_areas()
    for c in range(3):
        np.add.at(a, mesh.faces[:, c], fa / 3.0)
    return a


def match_mean(pred: np.ndarray, truth: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Shift ``pred`` so its weighted mean equals that of ``truth`` (Poisson gauge)."""
    w = weights / weights.sum()
    return pred + float(np.sum(w * (truth - pred)))


# ---------------------------------------------------------------------------
# configuration


@dataclass
class SphereSuiteConfig:
    resolutions: tuple = ("coarse", "medium", "fine", "very fine")
    solvers: tuple = SOLVERS
    pdes: tuple = PDES
    seed: int = 0
    poisson_l: int = 2
    heat_l: int = 1
    t_final: float = 0.25


@dataclass
class RemeshSuiteConfig:
    n_vertices: int = 1500
    modes: tuple = SPHERE_MODES
    seeds: tuple = (0, 1, 2)
    solvers: tuple = ("sfem", "ours")
    poisson_l: int = 2


@dataclass
class BoundarySuiteConfig:
    axis: int = 1
    level: float = -0.5
    wave: int = 3
    n_vertices: int = 10_000
    steady_tol: float = 1e-4
    transient_t: float = 0.05


@dataclass
class RuntimeConfig:
    band_sizes: tuple = (10_000, 20_000, 50_000)
    mesh_sizes: tuple = (1_000, 10_000, 100_000)
    t_final: float = 0.01
    repeats: int = 2


@dataclass
class HarnessConfig:
    solve: SolveConfig = field(default_factory=lambda: SolveConfig(dx=SPHERE_DX))
    sphere: SphereSuiteConfig = field(default_factory=SphereSuiteConfig)
    remesh: RemeshSuiteConfig = field(default_factory=RemeshSuiteConfig)
    boundary: BoundarySuiteConfig = field(default_factory=BoundarySuiteConfig)
    runtime: RuntimeConfig = field(default_factory=RuntimeConfig)
    weights: Optional[str] = None
    out_dir: str = "results"
    workers: int = 1


def _fill(cls, table: dict):
    names = {f.name: f for f in dataclasses.fields(cls)}
    kw = {}
    for key, val in table.items():
        key = key.replace("-", "_")
        if key not in names:
            raise ValueError(f"unknown key {key!r} for {cls.__name__}")
        kw[key] = tuple(val) if isinstance(val, list) else val
    return cls(**kw)


def load_config(path=None, overrides: Optional[dict] = None) -> HarnessConfig:
    """Read a TOML file with optional [solve], [sphere], [remesh], [boundary], [runtime]."""
    data = {}
    if path is not None:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    data.update(overrides or {})
    solve = dict(data.pop("solve", {}))
    solve.setdefault("dx", SPHERE_DX)
    cfg = HarnessConfig(solve=_fill(SolveConfig, solve),
                        sphere=_fill(SphereSuiteConfig, data.pop("sphere", {})),
                        remesh=_fill(RemeshSuiteConfig, data.pop("remesh", {})),
                        boundary=_fill(BoundarySuiteConfig, data.pop("boundary", {})),
                        runtime=_fill(RuntimeConfig, data.pop("runtime", {})))
    for key, val in data.items():
        if not hasattr(cfg, key):
            raise ValueError(f"unknown top-level key {key!r}")
        setattr(cfg, key, val)
    return cfg


# ---------------------------------------------------------------------------
# weights


def _data_dir() -> str:
    return os.path.join(os.path.dirname(__file__), "data")


def default_weights_path(alpha: float = 1e-2) -> str:
    name = "weights_alpha0.npz" if alpha == 0 else "weights.npz"
    return os.path.join(_data_dir(), name)


def default_weights(alpha: float = 1e-2, retrain: Optional[bool] = None) -> OperatorParams:
    """Packaged weights for the given L_NC weight, trained on demand.

    Set SURFBAND_RETRAIN=1 to ignore the cached file.
    """
    path = default_weights_path(alpha)
    if retrain is None:
        retrain = os.environ.get("SURFBAND_RETRAIN", "") not in ("", "0")
    if os.path.exists(path) and not retrain:
        return load_params(path)
    from .training import TrainConfig, train
    log.info("training weights for alpha=%g", alpha)
    res = train(TrainConfig(alpha=alpha))
    os.makedirs(os.path.dirname(path), exist_ok=True)
    from .operator import save_params
    save_params(res.params, path)
    return res.params


def resolve_weights(spec: Optional[str]) -> OperatorParams:
    if spec is None or spec == "default":
        return default_weights(1e-2)
    if spec == "alpha0":
        return default_weights(0.0)
    return load_params(spec)


# ---------------------------------------------------------------------------
# shapes


def resolve_shape(name: str, n_vertices: int = 1000, mode: str = "regular",
                  seed: int = 0) -> Surface:
    """'sphere', 'torus' or a path to a mesh or oriented point cloud (normalized)."""
    if name == "sphere":
        return sphere_mesh(n_vertices, mode, seed)
    if name == "torus":
        return torus_mesh()
    surf, _ = normalize_shape(load_surface(name))
    return surf


# ---------------------------------------------------------------------------
# sphere suite


@dataclass(frozen=True)
class BenchmarkCase:
    shape: str
    resolution: str
    pde: str
    solver: str
    seed: int = 0
    mode: str = "regular"

    def __post_init__(self):
        if self.resolution not in RESOLUTIONS and not self.resolution.isdigit():
            raise ValueError(f"unknown resolution tag {self.resolution!r}")
        if self.pde not in PDES:
            raise ValueError(f"unknown pde {self.pde!r}")
        if self.solver not in SOLVERS:
            raise ValueError(f"unknown solver {self.solver!r}")

    @property
    def n_vertices(self) -> int:
        return RESOLUTIONS.get(self.resolution) or int(self.resolution)

    @property
    def case_id(self) -> str:
        return f"{self.shape}/{self.mode}/{self.resolution}/{self.pde}/{self.solver}/{self.seed}"


def _sphere_problem(case: BenchmarkCase, poisson_l: int, heat_l: int, t_final: float):
    if case.pde == "poisson":
        rhs = lambda x: real_sph_harm(poisson_l, 0, x)
        return rhs, sphere_analytic("poisson", poisson_l)
    u0 = lambda x: real_sph_harm(heat_l, 0, x)
    return u0, sphere_analytic("heat", heat_l, t=t_final)


def run_sphere_case(case: BenchmarkCase, solve: SolveConfig, params: Optional[OperatorParams],
                    poisson_l: int = 2, heat_l: int = 1, t_final: float = 0.25) -> dict:
    """One solver on one sphere mesh; returns a result row."""
    t0 = time.time()
    mesh = sphere_mesh(case.n_vertices, case.mode, case.seed)
    data, exact = _sphere_problem(case, poisson_l, heat_l, t_final)
    truth = exact(mesh.vertices)
    cfg = dataclasses.replace(solve, t_final=t_final, steady=False)
    extra = {}
    if case.solver == "sfem":
        if case.pde == "poisson":
            res = fem_solve_poisson(mesh, data)
        else:
            res = fem_solve_heat(mesh, data, t_final)
        pred, iters = res.values, res.iterations
    else:
        if case.solver == "cpm":
            fn = cpm_solve_poisson if case.pde == "poisson" else cpm_solve_heat
            rep = fn(mesh, data, cfg)
        else:
            if params is None:
                raise ValueError("the learned solver needs weights")
            fn = solve_poisson if case.pde == "poisson" else solve_heat
            rep = fn(mesh, params, data, cfg)
        pred, iters = rep.readout, rep.iterations
        extra = dict(n_band=rep.info.get("n_band"), converged=rep.converged)
    if case.pde == "poisson":
        pred = match_mean(pred, truth, vertex_areas(mesh))
    m = metrics(pred, truth)
    row = dict(case_id=case.case_id, shape=case.shape, mode=case.mode,
               resolution=case.resolution, n_vertices=len(mesh.vertices), pde=case.pde,
               solver=case.solver, seed=case.seed, status="ok", iterations=iters,
               wall_time=time.time() - t0)
    row.update(m.as_dict())
    row.update(extra)
    return row


def _failed_row(case: BenchmarkCase, exc: BaseException) -> dict:
    log.error("case %s failed: %s", case.case_id, exc)
    return dict(case_id=case.case_id, shape=case.shape, mode=case.mode,
                resolution=case.resolution, pde=case.pde, solver=case.solver, seed=case.seed,
                status="failed", error=f"{type(exc).__name__}: {exc}")


def _safe_case(args):
    case, solve, params, kw = args
    try:
        return run_sphere_case(case, solve, params, **kw)
    except Exception as exc:         # a failed case is reported, the suite goes on
        log.debug(traceback.format_exc())
        return _failed_row(case, exc)


def run_cases(cases: Sequence[BenchmarkCase], solve: SolveConfig,
              params: Optional[OperatorParams], workers: int = 1, **kw) -> List[dict]:
    jobs = [(c, solve, params, kw) for c in cases]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            rows = list(pool.map(_safe_case, jobs))
    else:
        rows = [_safe_case(j) for j in jobs]
    return sorted(rows, key=lambda r: r["case_id"])


def sphere_suite(cfg: HarnessConfig, params: Optional[OperatorParams] = None) -> List[dict]:
    s = cfg.sphere
    if params is None and "ours" in s.solvers:
        params = resolve_weights(cfg.weights)
    cases = [BenchmarkCase("sphere", r, p, v, s.seed)
             for r in s.resolutions for p in s.pdes for v in s.solvers]
    return run_cases(cases, cfg.solve, params, cfg.workers, poisson_l=s.poisson_l,
                     heat_l=s.heat_l, t_final=s.t_final)


# ---------------------------------------------------------------------------
# remeshing robustness


def remesh_suite(cfg: HarnessConfig, params: Optional[OperatorParams] = None) -> List[dict]:
    r = cfg.remesh
    if params is None and "ours" in r.solvers:
        params = resolve_weights(cfg.weights)
    cases = [BenchmarkCase("sphere", str(r.n_vertices), "poisson", v, seed, mode)
             for mode in r.modes for seed in r.seeds for v in r.solvers]
    return run_cases(cases, cfg.solve, params, cfg.workers, poisson_l=r.poisson_l)


def remesh_summary(rows: Sequence[dict]) -> List[dict]:
    """Per (solver, mode): mean and spread of NMAE/NMaxE, deviation from regular."""
    out = []
    ok = [r for r in rows if r.get("status") == "ok"]
    for solver in sorted({r["solver"] for r in ok}):
        base = None
        group = {}
        for r in ok:
            if r["solver"] == solver:
                group.setdefault(r["mode"], []).append(r)
        for mode in SPHERE_MODES:
            if mode not in group:
                continue
            a = np.array([x["nmae"] for x in group[mode]])
            b = np.array([x["nmaxe"] for x in group[mode]])
            if mode == "regular":
                base = a.mean()
            out.append(dict(solver=solver, mode=mode, n=len(a), nmae_mean=a.mean(),
                            nmae_spread=a.max() - a.min(), nmaxe_mean=b.mean(),
                            nmaxe_spread=b.max() - b.min()))
        for row in out:
            if row["solver"] == solver:
                row["rel_to_regular"] = (row["nmae_mean"] / base - 1.0
                                         if base else float("nan"))
    return out


# ---------------------------------------------------------------------------
# Dirichlet boundary experiments


def boundary_data(kind: str, wave: int = 3):
    """(initial condition, boundary data) for the 'constant' and 'sinusoidal' cases."""
    if kind == "constant":
        return (lambda x: np.zeros(len(x))), (lambda x: np.ones(len(x)))
    if kind == "sinusoidal":
        g = lambda x: np.sin(wave * np.arctan2(x[:, 0], x[:, 2]))
        return (lambda x: -g(x)), g
    raise ValueError(f"unknown boundary case {kind!r}")


def cap_rim(mesh: TriangleMesh, axis: int, level: float, tol: float = 1e-9) -> np.ndarray:
    return np.nonzero(np.abs(mesh.vertices[:, axis] - level) < tol)[0]


def run_boundary_case(kind: str, solve: SolveConfig, params: Optional[OperatorParams],
                      b: BoundarySuiteConfig, solver: str = "ours",
                      closed: Optional[TriangleMesh] = None) -> List[dict]:
    """Heat with Dirichlet data on the sphere cap {x_axis >= level}, compared with FEM.

    The band lives around the closed sphere and is cut by the plane; the FEM
    reference uses an open cap mesh whose rim lies on the plane, and both are
    read out at the cap vertices. Reported at steady state and at a transient
    time, where the constant case is normalized by its data range 1.
    """
    t0 = time.time()
    u0, g = boundary_data(kind, b.wave)
    cap = spherical_cap_mesh(b.n_vertices, b.axis, b.level)
    rim = cap_rim(cap, b.axis, b.level)
    ref = fem_solve_dirichlet_steady(cap, rim, g(cap.vertices[rim])).values
    closed = sphere_mesh(b.n_vertices) if closed is None else closed
    spec = BoundarySpec(PlaneCut(b.axis, b.level, 1.0), g)
    rows = []
    for phase, steady, t_final in (("steady", True, solve.t_final), ("transient", False,
                                                                     b.transient_t)):
        cfg = dataclasses.replace(solve, boundary=spec, steady=steady, t_final=t_final,
                                  steady_tol=b.steady_tol)
        if solver == "sfem":
            if steady:
                pred = ref
            else:
                pred = fem_solve_heat(cap, u0, t_final,
                                      dirichlet=(rim, g(cap.vertices[rim]))).values
            truth = pred
        else:
            fn = cpm_solve_heat if solver == "cpm" else solve_heat
            args = (closed, u0, cfg) if solver == "cpm" else (closed, params, u0, cfg)
            rep = fn(*args, readout_points=cap.vertices)
            pred = rep.readout
            if steady:
                truth = ref
            else:
                truth = fem_solve_heat(cap, u0, t_final,
                                       dirichlet=(rim, g(cap.vertices[rim]))).values
        vr = 1.0 if kind == "constant" else None
        if vr is None and float(np.ptp(truth)) == 0.0:
            vr = 1.0
        m = metrics(pred, truth, vr)
        row = dict(case_id=f"cap/{kind}/{phase}/{solver}", case=kind, phase=phase,
                   solver=solver, status="ok", n_vertices=len(cap.vertices),
                   wall_time=time.time() - t0)
        row.update(m.as_dict())
        rows.append(row)
    return rows


def boundary_suite(cfg: HarnessConfig, params: Optional[OperatorParams] = None,
                   solvers: Sequence[str] = ("ours", "cpm")) -> List[dict]:
    if params is None and "ours" in solvers:
        params = resolve_weights(cfg.weights)
    rows = []
    closed = sphere_mesh(cfg.boundary.n_vertices)
    for kind in ("constant", "sinusoidal"):
        for solver in solvers:
            try:
                rows += run_boundary_case(kind, cfg.solve, params, cfg.boundary, solver, closed)
            except Exception as exc:
                log.error("boundary case %s/%s failed: %s", kind, solver, exc)
                rows.append(dict(case_id=f"cap/{kind}/-/{solver}", case=kind, solver=solver,
                                 status="failed", error=f"{type(exc).__name__}: {exc}"))
    return sorted(rows, key=lambda r: r["case_id"])


# ---------------------------------------------------------------------------
# generalization to other shapes


def steady_mean_case(surface: Surface, params: OperatorParams, u0: Callable,
                     solve: SolveConfig, solver: str = "ours") -> dict:
    """Heat flow to steady state on a closed surface against the area mean of u0.

    The reference is constant, so errors are normalized by the range of u0
    on the readout points.
    """
    t0 = time.time()
    cfg = dataclasses.replace(solve, steady=True)
    if solver == "cpm":
        rep = cpm_solve_heat(surface, u0, cfg)
    else:
        rep = solve_heat(surface, params, u0, cfg)
    if isinstance(surface, TriangleMesh):
        pts, w = surface.vertices, vertex_areas(surface)
    else:
        raise ValueError("steady-mean reference needs a mesh for area weights")
    vals = u0(pts)
    mean = float(np.sum(w * vals) / np.sum(w))
    m = metrics(rep.readout, np.full(len(pts), mean), float(np.ptp(vals)))
    row = dict(solver=solver, status="ok", converged=rep.converged, iterations=rep.iterations,
               mean=mean, wall_time=time.time() - t0)
    row.update(m.as_dict())
    return row


# ---------------------------------------------------------------------------
# runtime scaling


def dx_for_band_size(n_band: int, epsilon_factor: float, radius: float = 1.0) -> float:
    """Spacing giving about ``n_band`` nodes in a band of half-width eps_factor*dx."""
    return math.sqrt(4 * math.pi * radius ** 2 * 2 * epsilon_factor / n_band)


def runtime_scaling(cfg: HarnessConfig, params: Optional[OperatorParams] = None) -> List[dict]:
    """Wall time of a short learned heat solve over band sizes and mesh sizes."""
    rc = cfg.runtime
    params = resolve_weights(cfg.weights) if params is None else params
    rows = []
    u0 = lambda x: real_sph_harm(1, 0, x)
    for nb in rc.band_sizes:
        dx = dx_for_band_size(nb, cfg.solve.eps_factor)
        for nv in rc.mesh_sizes:
            mesh = sphere_mesh(nv)
            solve = dataclasses.replace(cfg.solve, dx=dx, t_final=rc.t_final, steady=False,
                                        dt=None)
            times = []
            n_band = None
            for _ in range(rc.repeats):
                t0 = time.time()
                rep = solve_heat(mesh, params, u0, solve)
                times.append(time.time() - t0)
                n_band = rep.info.get("n_band")
            rows.append(dict(case_id=f"runtime/{nb}/{nv}", target_band=nb, n_band=n_band,
                             dx=dx, n_vertices=nv, wall_time=float(np.mean(times)),
                             wall_time_spread=float(np.ptp(times)), status="ok"))
    return rows


# ---------------------------------------------------------------------------
# persistence


def write_csv(rows: Sequence[dict], path) -> None:
    keys: List[str] = []
    for r in rows:
        for k in r:
            if k not in keys:
                keys.append(k)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys, restval="")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(v) for k, v in r.items()})


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.6g}"
    return v


def format_table(rows: Sequence[dict], columns: Sequence[str]) -> str:
    """Fixed-width text rendering of selected columns."""
    cells = [[str(c) for c in columns]]
    for r in rows:
        cells.append([_fmt_cell(r.get(c, "")) for c in columns])
    widths = [max(len(row[i]) for row in cells) for i in range(len(columns))]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(row, widths)) for row in cells)


def _fmt_cell(v) -> str:
    if isinstance(v, float):
        return f"{v:.3e}"
    return str(v)
