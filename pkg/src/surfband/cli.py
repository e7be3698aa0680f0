"""Command line entry points: solvers, baselines, benchmark suites and training."""
from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import re
import sys
from typing import Callable, List, Optional

import numpy as np

from . import harness
from .band import BoundarySpec, PlaneCut, dump_band_csv
from .baselines import (cpm_config, cpm_extension, cpm_prepare, fem_solve_dirichlet_steady,
                        fem_solve_heat, fem_solve_poisson, real_sph_harm)
from .geometry import SPHERE_MODES, TriangleMesh
from .solver import (SolveConfig, SolveReport, learned_extension, prepare, run_heat,
                     run_poisson)

log = logging.getLogger("surfband")

AXES = {"x": 0, "y": 1, "z": 2}
_NS = {name: getattr(np, name) for name in ("sin", "cos", "tan", "exp", "log", "sqrt", "abs",
                                            "arctan2", "arccos", "arcsin", "tanh", "pi")}
_NS["atan2"] = np.arctan2


class UsageError(ValueError):
    pass


# ---------------------------------------------------------------------------
# argument parsing helpers


def parse_function(text: str) -> Callable[[np.ndarray], np.ndarray]:
    """Surface function from 'ylm:l,m', 'const:c' or a numpy expression in x, y, z."""
    text = text.strip()
    if text.startswith("ylm:"):
        l, m = (int(v) for v in text[4:].split(","))
        return lambda p: real_sph_harm(l, m, p)
    if text.startswith("const:"):
        c = float(text[6:])
        return lambda p: np.full(len(p), c)
    if text.startswith("sin:"):
        k = float(text[4:])
        return lambda p: np.sin(k * np.arctan2(p[:, 0], p[:, 2]))
    try:
        code = compile(text, "<function>", "eval")
    except SyntaxError as exc:
        raise UsageError(f"cannot parse function {text!r}: {exc}") from exc

    def f(p):
        ns = dict(_NS, x=p[:, 0], y=p[:, 1], z=p[:, 2])
        out = eval(code, {"__builtins__": {}}, ns)
        return np.broadcast_to(np.asarray(out, dtype=float), (len(p),)).copy()
    return f


_PLANE = re.compile(r"^plane:([xyz])\s*(>=|<=|=)\s*([-+0-9.eE]+)$")


def parse_boundary(text: Optional[str]) -> Optional[BoundarySpec]:
    """'plane:z=0,g=const:1' keeps z >= 0; use 'z<=0' for the other side."""
    if not text:
        return None
    head, sep, rest = text.partition(",")
    m = _PLANE.match(head.strip())
    if not m:
        raise UsageError(f"boundary must start with plane:<axis>=<level>, got {head!r}")
    axis, op, level = m.groups()
    sign = -1.0 if op == "<=" else 1.0
    rest = rest.strip()
    if not rest.startswith("g="):
        raise UsageError("boundary needs the Dirichlet data as g=<function>")
    return BoundarySpec(PlaneCut(AXES[axis], float(level), sign), parse_function(rest[2:]))


def _common(p: argparse.ArgumentParser, solver: bool = True):
    p.add_argument("--shape", default="sphere",
                   help="sphere, torus, or a path to an OBJ mesh or XYZN point cloud")
    p.add_argument("--vertices", type=int, default=1000, help="sphere mesh size")
    p.add_argument("--mode", default="regular", choices=SPHERE_MODES, help="sphere sampling")
    p.add_argument("--seed", type=int, default=0)
    if solver:
        p.add_argument("--dx", type=float, default=None,
                       help="grid spacing (default 0.06 on the unit sphere, 0.03 otherwise)")
        p.add_argument("--eps", type=float, default=None, help="band half-width (default 3 dx)")
        p.add_argument("--k", type=int, default=400, help="band nodes per patch")
        p.add_argument("--dt", type=float, default=None)
        p.add_argument("--cadence", type=int, default=None, help="steps between re-extensions")
        p.add_argument("--tol", type=float, default=None,
                       help="stationarity tolerance (Poisson, or steady heat)")
    p.add_argument("--t-final", type=float, default=0.25)
    p.add_argument("--steady", action="store_true", help="heat: run to steady state")
    p.add_argument("--boundary", default=None, help='e.g. "plane:z=0,g=const:1"')
    p.add_argument("--out", default=None, help="output prefix")


def _solve_config(a) -> SolveConfig:
    dx = a.dx if a.dx is not None else (harness.SPHERE_DX if a.shape == "sphere" else 0.03)
    kw = dict(dx=dx, k=a.k, dt=a.dt, t_final=a.t_final, steady=a.steady,
              boundary=parse_boundary(a.boundary), seed=a.seed)
    if a.eps is not None:
        kw["eps_factor"] = a.eps / dx
    if a.cadence is not None:
        kw["cadence"] = a.cadence
    if a.tol is not None:
        kw["poisson_tol"] = a.tol
        kw["steady_tol"] = a.tol
    return SolveConfig(**kw)


def _write_outputs(prefix: Optional[str], points: np.ndarray, values: np.ndarray,
                   report: dict, band=None, band_values=None):
    if prefix is None:
        return
    d = os.path.dirname(os.path.abspath(prefix))
    os.makedirs(d, exist_ok=True)
    np.savetxt(prefix + "_surface.csv", np.column_stack([points, values]), delimiter=",",
               header="x,y,z,u", comments="", fmt="%.10g")
    if band is not None:
        dump_band_csv(band, band_values, prefix + "_band.csv")
    with open(prefix + "_report.txt", "w") as fh:
        fh.write(format_report(report))


def format_report(report: dict) -> str:
    lines = []
    for k, v in report.items():
        if isinstance(v, float):
            v = f"{v:.6g}"
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# commands


def _band_solve(a, kind: str, extension: str) -> int:
    surface = harness.resolve_shape(a.shape, a.vertices, a.mode, a.seed)
    cfg = _solve_config(a)
    if extension == "cpm":
        cfg = cpm_config(cfg)
        disc = cpm_prepare(surface, cfg)
        ext = cpm_extension(disc)
    else:
        disc = prepare(surface, cfg)
        ext = learned_extension(disc, harness.resolve_weights(a.weights), cfg)
    fn = parse_function(a.u0 if kind == "heat" else a.f)
    if kind == "heat":
        rep: SolveReport = run_heat(disc, ext, fn, cfg)
    else:
        if cfg.boundary is not None:
            raise UsageError("Poisson runs on closed surfaces only")
        rep = run_poisson(disc, ext, fn, cfg)
    info = rep.summary()
    info.update(kind=kind, dx=cfg.dx, epsilon=disc.epsilon,
                setup_time=disc.build_time + ext.build_time)
    _write_outputs(a.out, disc.readout_points, rep.readout, info, disc.band, rep.field)
    print(format_report(info), end="")
    return 0


def cmd_solve_heat(a):
    return _band_solve(a, "heat", "learned")


def cmd_solve_poisson(a):
    return _band_solve(a, "poisson", "learned")


def cmd_baseline_cpm(a):
    return _band_solve(a, a.pde, "cpm")


def cmd_baseline_fem(a):
    surface = harness.resolve_shape(a.shape, a.vertices, a.mode, a.seed)
    if not isinstance(surface, TriangleMesh):
        raise UsageError("the FEM baseline needs a triangle mesh")
    spec = parse_boundary(a.boundary)
    if a.pde == "poisson":
        res = fem_solve_poisson(surface, parse_function(a.f))
        vals = res.values
    elif spec is not None:
        keep = spec.cut.signed(surface.vertices) >= 0
        if not keep.all():
            raise UsageError("FEM with a boundary needs an open mesh already cut at the plane")
        rim = np.nonzero(np.abs(spec.cut.signed(surface.vertices)) < 1e-9)[0]
        gvals = spec.g(surface.vertices[rim])
        if a.steady:
            res = fem_solve_dirichlet_steady(surface, rim, gvals)
        else:
            res = fem_solve_heat(surface, parse_function(a.u0), a.t_final, dirichlet=(rim, gvals))
        vals = res.values
    else:
        res = fem_solve_heat(surface, parse_function(a.u0), a.t_final,
                             steady_tol=1e-6 if a.steady else None)
        vals = res.values
    info = dict(kind=a.pde, solver="sfem", n_vertices=len(surface.vertices),
                iterations=res.iterations, converged=res.converged, wall_time=res.wall_time)
    _write_outputs(a.out, surface.vertices, vals, info)
    print(format_report(info), end="")
    return 0


def _load_cfg(a):
    cfg = harness.load_config(a.config)
    if a.weights is not None:
        cfg.weights = a.weights
    if a.workers is not None:
        cfg.workers = a.workers
    if a.out_dir is not None:
        cfg.out_dir = a.out_dir
    return cfg


def _emit(rows: List[dict], name: str, cfg, columns):
    path = os.path.join(cfg.out_dir, name + ".csv")
    harness.write_csv(rows, path)
    print(harness.format_table(rows, columns))
    print(f"wrote {path}")


def cmd_bench_sphere(a):
    cfg = _load_cfg(a)
    rows = harness.sphere_suite(cfg)
    _emit(rows, "sphere", cfg, ["resolution", "pde", "solver", "status", "nmae", "nmaxe",
                                "nrmse", "wall_time"])
    return 0


def cmd_bench_remesh(a):
    cfg = _load_cfg(a)
    rows = harness.remesh_suite(cfg)
    summary = harness.remesh_summary(rows)
    harness.write_csv(rows, os.path.join(cfg.out_dir, "remesh_cases.csv"))
    _emit(summary, "remesh", cfg, ["solver", "mode", "n", "nmae_mean", "nmae_spread",
                                   "nmaxe_mean", "rel_to_regular"])
    return 0


def cmd_bench_boundary(a):
    cfg = _load_cfg(a)
    rows = harness.boundary_suite(cfg)
    _emit(rows, "boundary", cfg, ["case", "phase", "solver", "status", "nrmse", "nmae",
                                  "nmaxe"])
    return 0


def cmd_bench_runtime(a):
    cfg = _load_cfg(a)
    rows = harness.runtime_scaling(cfg)
    _emit(rows, "runtime", cfg, ["target_band", "n_band", "n_vertices", "wall_time",
                                 "wall_time_spread"])
    return 0


def cmd_train(a):
    from .operator import save_params
    from .training import TrainConfig, train, write_history
    kw = {}
    if a.config:
        with open(a.config, "rb") as fh:
            kw = harness.tomllib.load(fh)
        kw = kw.get("train", kw)
        if "hidden" in kw:
            kw["hidden"] = tuple(kw["hidden"])
    for name in ("alpha", "epochs", "lr", "seed"):
        v = getattr(a, name)
        if v is not None:
            kw[name] = v
    cfg = TrainConfig(**kw)

    def progress(row):
        print(f"epoch {row['epoch']:4d}  L_mse {row['L_mse']:.3e}  L_nc {row['L_nc']:.3e}  "
              f"val_rmse {row['val_rmse']:.3e}", flush=True)

    res = train(cfg, progress=progress)
    os.makedirs(os.path.dirname(os.path.abspath(a.out)), exist_ok=True)
    save_params(res.params, a.out)
    hist = os.path.splitext(a.out)[0] + "_history.csv"
    write_history(res.history, hist)
    print(f"wrote {a.out} and {hist} ({res.wall_time:.0f} s)")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    top = argparse.ArgumentParser(prog="surfband", description=__doc__)
    top.add_argument("-v", "--verbose", action="store_true")
    sub = top.add_subparsers(dest="command", required=True)

    for name, fn, kind in (("solve-heat", cmd_solve_heat, "heat"),
                           ("solve-poisson", cmd_solve_poisson, "poisson")):
        p = sub.add_parser(name, help=f"learned {kind} solve")
        _common(p)
        p.add_argument("--weights", default=None, help="weight file, 'default' or 'alpha0'")
        if kind == "heat":
            p.add_argument("--u0", default="ylm:1,0", help="initial condition")
        else:
            p.add_argument("--f", default="ylm:2,0", help="right-hand side")
        p.set_defaults(func=fn)

    p = sub.add_parser("baseline-cpm", help="closest point method with tricubic re-extension")
    _common(p)
    p.add_argument("--pde", choices=("heat", "poisson"), default="poisson")
    p.add_argument("--u0", default="ylm:1,0")
    p.add_argument("--f", default="ylm:2,0")
    p.set_defaults(func=cmd_baseline_cpm)

    p = sub.add_parser("baseline-fem", help="cotangent-Laplacian surface FEM")
    _common(p, solver=False)
    p.add_argument("--pde", choices=("heat", "poisson"), default="poisson")
    p.add_argument("--u0", default="ylm:1,0")
    p.add_argument("--f", default="ylm:2,0")
    p.set_defaults(func=cmd_baseline_fem)

    for name, fn in (("bench-sphere", cmd_bench_sphere), ("bench-remesh", cmd_bench_remesh),
                     ("bench-boundary", cmd_bench_boundary),
                     ("bench-runtime", cmd_bench_runtime)):
        p = sub.add_parser(name, help=f"{name[6:]} benchmark suite")
        p.add_argument("--config", default=None, help="TOML configuration")
        p.add_argument("--weights", default=None)
        p.add_argument("--workers", type=int, default=None)
        p.add_argument("--out-dir", default=None)
        p.set_defaults(func=fn)

    p = sub.add_parser("train", help="train the extension operator on the bumpy sphere")
    p.add_argument("--config", default=None, help="TOML file with TrainConfig fields")
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default="weights.npz")
    p.set_defaults(func=cmd_train)
    return top


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    a = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return a.func(a)
    except UsageError as exc:
        parser.error(str(exc))
    return 2


if __name__ == "__main__":
    sys.exit(main())
