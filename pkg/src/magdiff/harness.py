"""Experiment orchestration and command-line entry point.

Every command takes a validated :class:`RunConfig`, writes its artifacts into
an output directory and returns a JSON-serializable report that embeds the
resolved configuration and the velocity-grid deficit.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import kinetic_sim as ks
from . import macro_sim as ms
from .cell_solvers import compute_expansion, expansion_remainders, solve_chi_eta
from .collision_ops import CollisionKernel, build_kernel, make_cross_section
from .config import RunConfig
from .diffusion_tensor import (
    ROTATION_BLOCK,
    assemble_D_eta,
    d_parallel,
    expansion_blocks,
    expansion_tensor,
    is_positive_definite,
    max_relative_error,
    relaxation_reference,
    write_sweep_csv,
)
from .errors import ConvergenceError, MagdiffError, SolvabilityError, StabilityError, ValidationError
from .grid import build_grid, norm_values

log = logging.getLogger("magdiff")

EXIT_OK, EXIT_VALIDATION, EXIT_SOLVER = 0, 2, 3


# ---------------------------------------------------------------------------
# helpers

def fit_loglog(x, y) -> dict | None:
    """Least-squares line through ``(log x, log y)``.

    Returns ``None`` with fewer than two usable points.  The RMS residual in
    log space is reported with the slope.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    ok = (x > 0) & (y > 0) & np.isfinite(y)
    if ok.sum() < 2:
        return None
    lx, ly = np.log(x[ok]), np.log(y[ok])
    (slope, icpt), res, *_ = np.polyfit(lx, ly, 1, full=True)
    rms = math.sqrt(float(res[0]) / ok.sum()) if len(res) else 0.0
    return {"slope": float(slope), "intercept": float(icpt), "residual_rms": rms,
            "n_points": int(ok.sum()), "dropped": int((~ok).sum())}


def _grid(cfg: RunConfig, kinetic: bool = False):
    if kinetic:
        return build_grid(cfg.kinetic_n_radial, cfg.kinetic_n_angle, cfg.kinetic_n_parallel,
                          cfg.v_max_perp, cfg.v_max_par)
    return build_grid(cfg.n_radial, cfg.n_angle, cfg.n_parallel, cfg.v_max_perp, cfg.v_max_par)


def _kernel(cfg: RunConfig, kinetic: bool = False) -> CollisionKernel:
    cs = make_cross_section(cfg.cross_section, cfg.cross_section_params)
    return build_kernel(_grid(cfg, kinetic), cs, storage=cfg.storage)


def _out(out_dir) -> Path:
    p = Path(out_dir)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _base_report(cfg: RunConfig, command: str, grid) -> dict:
    return {"command": command, "config": cfg.to_dict(), "grid": grid.describe(),
            "grid_deficit": grid.deficit}


def _write_report(out: Path, report: dict) -> dict:
    (out / "report.json").write_text(json.dumps(report, indent=2, default=_json_default))
    return report


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    raise TypeError(f"not serializable: {type(o)}")


def _map(func, items, workers: int):
    if workers <= 1 or len(items) <= 1:
        return [func(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(func, items))


def _with_context(func, what: str):
    """Wrap ``func(x)`` so that library errors carry the sweep point."""
    def inner(x):
        try:
            return func(x)
        except ValidationError as exc:
            raise ValidationError(f"{what}={x}: {exc}") from exc
        except MagdiffError as exc:
            exc.args = (f"{what}={x}: {exc}",) + exc.args[1:]
            raise
    return inner


def _tau(cfg: RunConfig) -> float:
    return float(cfg.cross_section_params.get("tau", 1.0))


# ---------------------------------------------------------------------------
# commands

def cmd_cell_problem(cfg: RunConfig, out_dir) -> dict:
    """Solve the three cell problems for every ``eta`` and dump them."""
    out = _out(out_dir)
    kernel = _kernel(cfg)
    grid = kernel.grid
    report = _base_report(cfg, "cell-problem", grid)

    def one(eta):
        cell = solve_chi_eta(kernel, eta, cfg.method, tol=cfg.solver_tol)
        sidecar = cell.save(out, stem=f"cell_eta_{eta:g}")
        entry = {"eta": eta, "files": str(sidecar), "residual_norm": cell.residual_norm,
                 "mass_defect": cell.mass_defect, "diagnostics": cell.diagnostics}
        if cfg.cross_section == "constant":
            # relaxation: -Q(X) = nu X on zero-mass data, hence X_z = v_z M / nu
            ref = grid.vz * grid.maxwellian * _tau(cfg) / grid.mass_maxwellian
            err = float(norm_values(grid, cell.x_z.values - ref) / norm_values(grid, ref))
            entry["relaxation_xz_relative_error"] = err
        return entry

    report["cells"] = _map(_with_context(one, "eta"), cfg.eta, cfg.workers)
    return _write_report(out, report)


def cmd_diffusion_matrix(cfg: RunConfig, out_dir) -> dict:
    """``D^eta`` for every ``eta`` with positivity, adjoint and relaxation checks."""
    out = _out(out_dir)
    kernel = _kernel(cfg)
    report = _base_report(cfg, "diffusion-matrix", kernel.grid)

    def one(eta):
        t0 = time.perf_counter()
        d = assemble_D_eta(solve_chi_eta(kernel, eta, cfg.method, tol=cfg.solver_tol))
        entry = {"eta": eta, "tensor": d.to_dict(),
                 "positive_definite": is_positive_definite(d, seed=cfg.seed)}
        tensors = [d]
        if cfg.check_adjoint:
            da = assemble_D_eta(solve_chi_eta(kernel, eta, cfg.method, adjoint=True, tol=cfg.solver_tol))
            entry["adjoint_max_difference"] = float(np.max(np.abs(da.d - d.d)))
            tensors.append(da)
        if cfg.cross_section == "constant":
            ref = relaxation_reference(_tau(cfg), eta)
            err = max_relative_error(d, ref)
            entry["relaxation_max_relative_error"] = err
            entry["relaxation_within_tolerance"] = bool(err <= cfg.relaxation_tol)
            tensors.append(ref)
        entry["seconds"] = time.perf_counter() - t0
        return entry, tensors

    results = _map(_with_context(one, "eta"), cfg.eta, cfg.workers)
    report["tensors"] = [r[0] for r in results]
    write_sweep_csv([t for r in results for t in r[1]], out / "diffusion_sweep.csv")
    return _write_report(out, report)


EXPANSION_COLUMNS = ("eta", "r_z", "r_perp", "d33_minus_dz", "sym_error", "antisym_error",
                     "rotation_error")


def cmd_expansion_study(cfg: RunConfig, out_dir) -> dict:
    """Remainders of the eta-expansion with fitted log-log slopes."""
    out = _out(out_dir)
    kernel = _kernel(cfg)
    report = _base_report(cfg, "expansion-study", kernel.grid)
    terms = compute_expansion(kernel, tol=cfg.zero_tol)
    terms.save(out)
    d_z = d_parallel(terms)
    report["d_z"] = d_z
    report["expansion_diagnostics"] = terms.diagnostics
    # norm of int v_z X0_perp, the first-order antisymmetric coupling
    c0_norm = float(np.linalg.norm(expansion_blocks(terms)["c0"]))

    def one(eta):
        cell = solve_chi_eta(kernel, eta, cfg.method, tol=cfg.solver_tol)
        rz, rp = expansion_remainders(cell, terms)
        d = assemble_D_eta(cell)
        de = expansion_tensor(terms, eta)
        return {
            "eta": eta, "r_z": rz, "r_perp": rp,
            "d33_minus_dz": abs(d.sym[2, 2] - d_z),
            "sym_error": float(np.max(np.abs(d.sym - de.sym))),
            "antisym_error": float(np.max(np.abs(d.antisym - de.antisym))),
            "rotation_error": float(np.max(np.abs(d.antisym[:2, :2] - ROTATION_BLOCK[:2, :2]))),
            "rotation_bound_linear": eta * c0_norm,
        }

    rows = sorted(_map(_with_context(one, "eta"), cfg.eta, cfg.workers), key=lambda r: -r["eta"])
    report["rows"] = rows
    etas = [r["eta"] for r in rows]
    slopes = {}
    if len(etas) >= 2:
        for key in EXPANSION_COLUMNS[1:]:
            slopes[key] = fit_loglog(etas, [r[key] for r in rows])
    report["slopes"] = slopes
    with (out / "expansion_table.csv").open("w") as fh:
        fh.write(",".join(EXPANSION_COLUMNS) + "\n")
        for r in rows:
            fh.write(",".join(repr(float(r[k])) for k in EXPANSION_COLUMNS) + "\n")
    return _write_report(out, report)


def _spatial(cfg: RunConfig) -> ks.SpatialGrid:
    return ks.SpatialGrid(cfg.geometry, tuple(cfg.n_cells), tuple(cfg.domain_lengths))


def cmd_kinetic(cfg: RunConfig, out_dir) -> dict:
    """One kinetic run at ``eps[0]``, ``eta[0]`` with snapshots."""
    out = _out(out_dir)
    kernel = _kernel(cfg, kinetic=True)
    report = _base_report(cfg, "kinetic", kernel.grid)
    spatial = _spatial(cfg)
    spec = ks.FieldSpec.for_grid(cfg.potential, cfg.potential_params, spatial)
    rho0 = ks.initial_density(spatial, cfg.initial_density, cfg.initial_params)
    field0 = ks.local_equilibrium(spatial, kernel.grid, rho0)
    eps, eta = cfg.eps[0], cfg.eta[0]
    t0 = time.perf_counter()
    res = ks.run(kernel, field0, spec, eps, eta, cfg.t_final, dt=cfg.dt,
                 snapshot_times=cfg.snapshot_times, out_dir=out,
                 max_gyration_angle=cfg.max_gyration_angle, dump_final=cfg.dump_field)
    ent = res.entropy
    report.update({
        "eps": eps, "eta": eta, "dt": res.dt, "n_steps": res.n_steps,
        "seconds": time.perf_counter() - t0,
        "mass_initial": float(res.total_mass[0]), "mass_final": float(res.total_mass[-1]),
        "mass_max_drift": float(np.max(np.abs(res.total_mass - res.total_mass[0]))),
        "entropy_initial": float(ent[0]), "entropy_final": float(ent[-1]),
        "entropy_max_increase": float(np.max(np.diff(ent))) if len(ent) > 1 else 0.0,
        "deviation_final": float(res.deviation[-1]),
        "snapshot_files": res.files,
    })
    np.savetxt(out / "kinetic_history.csv",
               np.column_stack([res.times, res.total_mass, res.total_current, res.entropy, res.deviation]),
               delimiter=",", header="t,mass,J_x,J_y,J_z,entropy,deviation", comments="")
    return _write_report(out, report)


def _macro_tensor(cfg: RunConfig, eta: float, kinetic: bool = True) -> np.ndarray:
    if cfg.diffusion_matrix is not None:
        return np.array(cfg.diffusion_matrix)
    return assemble_D_eta(solve_chi_eta(_kernel(cfg, kinetic), eta, cfg.method, tol=cfg.solver_tol)).d


def _macro_dz(cfg: RunConfig, kinetic: bool = True) -> float:
    if cfg.d_z is not None:
        return cfg.d_z
    return d_parallel(compute_expansion(_kernel(cfg, kinetic), tol=cfg.zero_tol))


def cmd_macro(cfg: RunConfig, out_dir) -> dict:
    """One macroscopic run with snapshot series and, when applicable, the variance oracle."""
    out = _out(out_dir)
    spatial = _spatial(cfg)
    if spatial.geometry == "homogeneous":
        raise ValidationError("macroscopic equations need slab_z or perp_xy", field="geometry")
    grid = _grid(cfg, kinetic=True)
    report = _base_report(cfg, "macro", grid)
    spec = ks.FieldSpec.for_grid(cfg.potential, cfg.potential_params, spatial)
    rho0 = ks.initial_density(spatial, cfg.initial_density, cfg.initial_params)
    kw = {}
    if cfg.equation == "drift_diffusion":
        kw["d"] = _macro_tensor(cfg, cfg.eta[0])
        report["diffusion_matrix"] = np.asarray(kw["d"]).tolist()
    else:
        kw["d_z"] = _macro_dz(cfg) if spatial.geometry == "slab_z" else (cfg.d_z or 0.0)
        report["d_z"] = kw["d_z"]
    res = ms.run_macro(ms.MacroField(spatial, rho0), cfg.equation, spec, cfg.t_final, dt=cfg.dt,
                       snapshot_times=cfg.snapshot_times, implicit=cfg.implicit, out_dir=out, **kw)
    report.update({
        "dt": res.dt, "n_steps": res.n_steps, "snapshot_files": res.files,
        "mass_max_drift": float(np.max(np.abs(res.mass - res.mass[0]))),
        "center_of_mass_final": res.center_of_mass[-1].tolist(),
        "min_density": float(res.final.rho.min()),
    })
    if (spatial.geometry == "slab_z" and cfg.potential == "zero" and cfg.initial_density == "gaussian"
            and float(cfg.initial_params.get("background", 0.0)) == 0.0):
        d_eff = kw["d"][2][2] if "d" in kw else kw["d_z"]
        var0 = ms.periodic_variance(spatial, rho0)
        var1 = ms.periodic_variance(spatial, res.final.rho)
        want = ms.gaussian_variance_oracle(var0, d_eff, cfg.t_final)
        report["variance"] = {"initial": var0, "final": var1, "oracle": want,
                              "relative_error": abs(var1 - want) / want}
    return _write_report(out, report)


def _l2(spatial: ks.SpatialGrid, a: np.ndarray) -> float:
    return math.sqrt(float(np.sum(a**2) * spatial.cell_volume))


def _convergence_slab(cfg: RunConfig, out: Path, report: dict):
    spatial = _spatial(cfg)
    kernel = _kernel(cfg, kinetic=True)
    spec = ks.FieldSpec.for_grid(cfg.potential, cfg.potential_params, spatial)
    eta = cfg.eta[0]
    d = _macro_tensor(cfg, eta)
    report["eta"] = eta
    report["diffusion_matrix"] = np.asarray(d).tolist()
    times = sorted(set(cfg.snapshot_times) | {cfg.t_final})
    # refined macro reference; coarse centres are centres of the middle fine cells
    r = cfg.macro_refine
    fine = ks.SpatialGrid("slab_z", (spatial.n_cells[0] * r,), spatial.lengths)
    fine_spec = ks.FieldSpec.for_grid(cfg.potential, cfg.potential_params, fine)
    mres = ms.run_macro(ms.MacroField(fine, ks.initial_density(fine, cfg.initial_density, cfg.initial_params)),
                        "drift_diffusion", fine_spec, cfg.t_final, d=d, snapshot_times=times,
                        implicit=cfg.implicit)
    refs = [s[r // 2::r] for s in mres.snapshots]
    rho0 = ks.initial_density(spatial, cfg.initial_density, cfg.initial_params)

    def one(eps):
        t0 = time.perf_counter()
        res = ks.run(kernel, ks.local_equilibrium(spatial, kernel.grid, rho0), spec, eps, eta,
                     cfg.t_final, dt=cfg.dt, snapshot_times=times,
                     max_gyration_angle=cfg.max_gyration_angle)
        errs = [_l2(spatial, m.rho - ref) for m, ref in zip(res.snapshots, refs)]
        dev = math.sqrt(float(np.trapezoid(res.deviation**2, res.times)))
        return {"eps": eps, "times": times, "l2_errors": errs, "final_error": errs[-1],
                "deviation_l2_time": dev, "n_steps": res.n_steps, "dt": res.dt,
                "mass_max_drift": float(np.max(np.abs(res.total_mass - res.total_mass[0]))),
                "seconds": time.perf_counter() - t0}

    return _map(_with_context(one, "eps"), cfg.eps, cfg.workers)


def _convergence_perp(cfg: RunConfig, out: Path, report: dict):
    spatial = _spatial(cfg)
    kernel = _kernel(cfg, kinetic=True)
    spec = ks.FieldSpec.for_grid(cfg.potential, cfg.potential_params, spatial)
    rho0 = ks.initial_density(spatial, cfg.initial_density, cfg.initial_params)
    paired = len(cfg.eta) == len(cfg.eps)
    uniform = spec.kind == "uniform"
    drift = None
    if uniform:
        e = spec.efield(0.0, 0.0, 0.0, 0.0)
        drift = np.array([e[1], -e[0]])
        report["drift_reference"] = drift.tolist()

    def one(i):
        eps = cfg.eps[i]
        eta = cfg.eta[i] if paired else cfg.eta[0]
        t_final = cfg.perp_horizon_eps2 * eps**2
        t0 = time.perf_counter()
        res = ks.run(kernel, ks.local_equilibrium(spatial, kernel.grid, rho0), spec, eps, eta,
                     t_final, dt=cfg.dt, max_gyration_angle=cfg.max_gyration_angle)
        vel_t = res.total_current[:, :2] / res.total_mass[:, None]
        half = len(res.times) // 2
        vel = vel_t[half:].mean(axis=0)
        disp = np.array([np.trapezoid(vel_t[:, k], res.times) for k in range(2)])
        mres = ms.run_macro(ms.MacroField(spatial, rho0), "guiding_center", spec, t_final)
        mdisp = mres.center_of_mass[-1] - mres.center_of_mass[0]
        ref_vel = drift if drift is not None else mdisp / t_final
        entry = {"eps": eps, "eta": eta, "t_final": t_final, "n_steps": res.n_steps, "dt": res.dt,
                 "com_velocity": vel.tolist(),
                 "velocity_relative_error": float(np.linalg.norm(vel - ref_vel) / np.linalg.norm(ref_vel)),
                 "kinetic_displacement": disp.tolist(), "macro_displacement": mdisp.tolist(),
                 "trajectory_relative_error": float(np.linalg.norm(disp - mdisp) / max(np.linalg.norm(mdisp), 1e-300)),
                 "final_error": float(np.linalg.norm(disp - mdisp) / max(np.linalg.norm(mdisp), 1e-300)),
                 "mass_max_drift": float(np.max(np.abs(res.total_mass - res.total_mass[0]))),
                 "seconds": time.perf_counter() - t0}
        return entry

    return _map(_with_context(one, "eps_index"), list(range(len(cfg.eps))), cfg.workers)


def cmd_convergence(cfg: RunConfig, out_dir) -> dict:
    """Kinetic runs over the ``eps`` list against the matching macroscopic model."""
    out = _out(out_dir)
    spatial = _spatial(cfg)
    report = _base_report(cfg, "convergence", _grid(cfg, kinetic=True))
    t0 = time.perf_counter()
    if spatial.geometry == "slab_z":
        rows = _convergence_slab(cfg, out, report)
    elif spatial.geometry == "perp_xy":
        rows = _convergence_perp(cfg, out, report)
    else:
        raise ValidationError("convergence needs slab_z or perp_xy", field="geometry")
    rows.sort(key=lambda r: -r["eps"])
    report["rows"] = rows
    errs = [r["final_error"] for r in rows]
    report["monotone_decrease"] = bool(all(b < a for a, b in zip(errs, errs[1:])))
    report["fit"] = fit_loglog([r["eps"] for r in rows], errs) if len(rows) >= 2 else None
    report["seconds"] = time.perf_counter() - t0
    # timings stay in the JSON report so that the CSV is reproducible byte for byte
    with (out / "convergence.csv").open("w") as fh:
        fh.write("eps,final_error\n")
        for r in rows:
            fh.write(f"{r['eps']!r},{r['final_error']!r}\n")
    return _write_report(out, report)


COMMANDS = {
    "cell-problem": cmd_cell_problem,
    "diffusion-matrix": cmd_diffusion_matrix,
    "expansion-study": cmd_expansion_study,
    "kinetic": cmd_kinetic,
    "macro": cmd_macro,
    "convergence": cmd_convergence,
}


# ---------------------------------------------------------------------------
# CLI

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="magdiff", description="Magnetized diffusion-limit toolkit.")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", type=Path, help="JSON configuration file (defaults when omitted)")
    p.add_argument("--out", type=Path, default=Path("magdiff_out"), help="output directory")
    p.add_argument("--workers", type=int, default=None, help="concurrent sweep points")
    p.add_argument("--seed", type=int, default=None, help="seed for randomized checks")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = {k: v for k, v in (("workers", args.workers), ("seed", args.seed)) if v is not None}
    try:
        if args.config is not None:
            cfg = RunConfig.load(args.config, overrides)
        else:
            cfg = RunConfig.from_dict(overrides)
        report = COMMANDS[args.command](cfg, args.out)
    except ValidationError as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (SolvabilityError, ConvergenceError, StabilityError, MagdiffError, np.linalg.LinAlgError) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    print(json.dumps(_summary(report), indent=2, default=_json_default))
    return EXIT_OK


def _summary(report: dict) -> dict:
    return {k: v for k, v in report.items() if k not in ("config", "grid")}


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
