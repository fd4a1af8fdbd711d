"""Drivers that turn a scenario configuration into files on disk.

``run_scenario`` simulates one framework and writes probes, snapshots
and a manifest; ``compare_frameworks`` pairs the electrodiffusion run
with the fixed-conductivity run on the same mesh; ``converge`` drives
the manufactured refinement study. The command line wraps these; tests
call them directly.
"""

import csv
import subprocess
import time
from pathlib import Path

import numpy as np

from . import __version__, config, output
from .errors import ConfigurationError
from .mms import convergence_study
from .scenarios import UM, build_problem, emi_conductivities
from .solver import EmiSolver, KnpEmiSolver


def describe_version():
    """git-describe when the working copy is available, else the version."""
    here = Path(__file__).resolve().parent
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=here, capture_output=True, text=True, timeout=10)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def _si_points(cfg, probe):
    pts = np.asarray(probe.point_um, dtype=float) * (1.0 if cfg.verification
                                                     else UM)
    return pts.reshape(1, -1)


def _active_probe_fields(cfg, solver):
    """(probe, field) pairs the solver can evaluate, fixed ordering.

    The comparison solver carries no concentrations, so probe fields it
    cannot produce are skipped rather than failing the whole run.
    """
    pairs = []
    for probe in cfg.probes:
        pts = _si_points(cfg, probe)
        for field in probe.fields:
            try:
                solver.probe(field, pts)
            except ConfigurationError:
                continue
            pairs.append((probe, field, pts))
    return pairs


def _snapshot_data(cfg, solver):
    mesh = solver.p.mesh
    nv = mesh.num_vertices
    data = {}
    data["phi_i"] = output.to_report_units("phi_i", output.scatter_point_field(
        solver.V_i, solver.phi_i, nv))
    data["phi_e"] = output.to_report_units("phi_e", output.scatter_point_field(
        solver.V_e, solver.phi_e, nv))
    conc = getattr(solver, "c", None)
    if conc is not None:
        for s in cfg.species:
            for side in ("i", "e"):
                name = f"{s.name}_{side}"
                space = solver.V_i if side == "i" else solver.V_e
                data[name] = output.scatter_point_field(
                    space, conc[(side, s.name)], nv)
    return data


def _time_scale(cfg):
    # verification runs keep their dimensionless clock
    return 1.0 if cfg.verification else 1e3


def run_scenario(cfg, out_dir, framework="knp", sigma=None, progress=None,
                 tag=""):
    """Simulate and write probes.csv, snapshots and manifest.json.

    ``framework`` selects the electrodiffusion solver ("knp") or the
    fixed-conductivity comparison solver ("emi"); for the latter,
    ``sigma`` overrides the scenario's conductivity choice (S/m pair).
    Returns the manifest payload with the solver attached under "_solver".
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    problem = build_problem(cfg)
    if framework == "knp":
        solver = KnpEmiSolver(problem)
    elif framework == "emi":
        si, se = emi_conductivities(cfg) if sigma is None else sigma
        solver = EmiSolver(problem, si, se)
    else:
        raise ConfigurationError(f"unknown framework {framework!r}")

    suffix = f"_{tag}" if tag else ""
    num_steps = cfg.num_steps()
    pairs = _active_probe_fields(cfg, solver)
    t_scale = _time_scale(cfg)
    snap_every = cfg.snapshot_every_ms
    records = []
    snapshots = []
    totals0 = None
    stats = {"grounding_max": 0.0, "conservation_max_rel_drift": 0.0}

    def observe(sv):
        t_out = sv.t * t_scale
        for probe, field, pts in pairs:
            value = output.to_report_units(field, sv.probe(field, pts))
            records.append(output.ProbeRecord(
                time_ms=t_out, probe=probe.id, field=field,
                value=float(value[0])))
        stats["grounding_max"] = max(stats["grounding_max"],
                                     abs(sv.grounding()))
        nonlocal totals0
        if hasattr(sv, "totals"):
            tot = sv.totals()
            if totals0 is None:
                totals0 = tot
            else:
                drift = max(abs(tot[k] - totals0[k]) / abs(totals0[k])
                            for k in tot)
                stats["conservation_max_rel_drift"] = max(
                    stats["conservation_max_rel_drift"], drift)

    def maybe_snapshot(sv, step):
        if snap_every <= 0:
            return
        t_out = sv.t * t_scale
        k = len(snapshots)
        due = t_out >= k * snap_every - 1e-9 or step == num_steps
        if not due:
            return
        name = f"snap{suffix}_{len(snapshots):04d}.vtk"
        output.write_vtk(out_dir / name, problem.mesh,
                         _snapshot_data(cfg, solver),
                         title=f"scenario {cfg.name} t={t_out:.6g}")
        snapshots.append({"file": name, "time_ms": t_out, "step": step})

    wall0 = time.perf_counter()
    observe(solver)
    maybe_snapshot(solver, 0)
    for step in range(1, num_steps + 1):
        solver.step()
        observe(solver)
        maybe_snapshot(solver, step)
        if progress is not None:
            progress(step, num_steps)
    wall = time.perf_counter() - wall0

    probes_csv = f"probes{suffix}.csv"
    output.write_probes(records, out_dir / probes_csv)
    manifest = {
        "scenario": cfg.name,
        "framework": framework,
        "version": describe_version(),
        "config_toml": config.dumps(cfg),
        "wall_time_s": round(wall, 3),
        "steps": num_steps,
        "end_time_ms": solver.t * t_scale,
        "probes_csv": probes_csv,
        "snapshots": snapshots,
        "solver_stats": {
            "dofs": int(sum(solver.blocks.values())),
            "grounding_max": stats["grounding_max"],
            "conservation_max_rel_drift":
                stats["conservation_max_rel_drift"],
        },
    }
    if framework == "emi":
        manifest["sigma_S_per_m"] = [solver.sigma_i, solver.sigma_e]
    output.write_manifest(out_dir / f"manifest{suffix}.json", manifest)
    manifest["_solver"] = solver
    manifest["_records"] = records
    return manifest


def compare_frameworks(cfg, out_dir, sigma=None, progress=None):
    """Run both frameworks on one scenario and difference the results.

    Writes the per-framework artefacts plus compare.csv (probe-aligned
    values and differences), profile.csv (extracellular potential along
    the axial probe line, with the comparison trace shifted to match at
    the first probe), and report.json with the field-wide maxima.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    man_knp = run_scenario(cfg, out_dir, framework="knp",
                           progress=progress, tag="knp")
    man_emi = run_scenario(cfg, out_dir, framework="emi", sigma=sigma,
                           progress=progress, tag="emi")
    knp, emi = man_knp["_solver"], man_emi["_solver"]

    by_key = {}
    for rec in man_knp["_records"]:
        by_key[(rec.time_ms, rec.probe, rec.field)] = [rec.value, None]
    for rec in man_emi["_records"]:
        entry = by_key.get((rec.time_ms, rec.probe, rec.field))
        if entry is not None:
            entry[1] = rec.value
    with open(out_dir / "compare.csv", "w", encoding="utf-8",
              newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("time_ms", "probe", "field", "knp", "emi", "diff"))
        for (t, probe, field), (a, b) in by_key.items():
            if b is None:
                continue
            writer.writerow((output.FLOAT_FMT % t, probe, field,
                             output.FLOAT_FMT % a, output.FLOAT_FMT % b,
                             output.FLOAT_FMT % (a - b)))

    # both solvers share the extracellular space, so the potentials
    # difference cleanly dof by dof
    dphi = (knp.phi_e - emi.phi_e) * 1e3
    report = {
        "scenario": cfg.name,
        "end_time_ms": man_knp["end_time_ms"],
        "sigma_S_per_m": man_emi["sigma_S_per_m"],
        "max_abs_phi_e_diff_mV": float(np.max(np.abs(dphi))),
        "l2_phi_e_diff_mV": float(np.sqrt(
            (knp.m_e_vec * (dphi / 1e3) ** 2).sum()
            / knp.m_e_vec.sum()) * 1e3),
        "max_abs_phi_m_diff_mV": float(
            np.max(np.abs(knp.phi_m - emi.phi_m)) * 1e3),
    }
    output.write_manifest(out_dir / "report.json", report)

    axial = [(p, f, pts) for p, f, pts in _active_probe_fields(cfg, knp)
             if p.id.startswith("axial") and f == "phi_e"]
    if axial:
        xs = np.array([p.point_um[0] for p, _, _ in axial])
        v_knp = np.array([float(output.to_report_units(
            "phi_e", knp.probe("phi_e", pts))[0]) for _, _, pts in axial])
        v_emi = np.array([float(output.to_report_units(
            "phi_e", emi.probe("phi_e", pts))[0]) for _, _, pts in axial])
        shift = v_knp[0] - v_emi[0]
        with open(out_dir / "profile.csv", "w", encoding="utf-8",
                  newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(("x_um", "knp_phi_e_mV", "emi_phi_e_mV",
                             "emi_normalized_mV"))
            for x, a, b in zip(xs, v_knp, v_emi):
                writer.writerow((output.FLOAT_FMT % x, output.FLOAT_FMT % a,
                                 output.FLOAT_FMT % b,
                                 output.FLOAT_FMT % (b + shift)))
    return report


def parse_levels(text):
    """'8,16,32,64' -> level count, validating the doubling series."""
    try:
        ns = [int(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise ConfigurationError(
            f"--levels wants comma-separated mesh sizes, got {text!r}") \
            from None
    if not ns:
        raise ConfigurationError("--levels is empty")
    expected = [8 * 2 ** k for k in range(len(ns))]
    if ns != expected:
        raise ConfigurationError(
            f"the refinement series is fixed at {expected} (time step "
            f"quarters per level); got {ns}")
    return len(ns)


def converge(levels, out_dir, progress=None):
    """Run the refinement study; write convergence.csv and table.txt."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    report = convergence_study(levels=levels, progress=progress)
    output.write_convergence_csv(report, out_dir / "convergence.csv")
    table = output.format_convergence_table(report)
    (out_dir / "table.txt").write_text(table, encoding="utf-8")
    output.write_manifest(out_dir / "manifest.json", {
        "kind": "convergence",
        "version": describe_version(),
        "levels": [{"n": lev.n, "dt": lev.dt, "num_steps": lev.num_steps}
                   for lev in report.levels],
        "files": ["convergence.csv", "table.txt"],
    })
    return report, table
