"""Command line: run scenarios, verify convergence, compare frameworks.

Exit codes: 0 success, 2 configuration error, 3 solver failure,
4 instability. The pipeline is deterministic end to end; --seedless is
reserved so scripts depending on it fail loudly instead of silently.
"""

import argparse
import sys
from pathlib import Path

from .errors import (
    ConfigurationError,
    GeometryError,
    InstabilityError,
    SolverError,
)
from . import config, output, runner, scenarios


def _parse_snapshot_every(text):
    if text is None:
        return None
    raw = text[:-2] if text.endswith("ms") else text
    try:
        value = float(raw)
    except ValueError:
        raise ConfigurationError(
            f"--snapshot-every wants milliseconds (e.g. 1ms), "
            f"got {text!r}") from None
    if value < 0:
        raise ConfigurationError("--snapshot-every must be nonnegative")
    return value


def _parse_emi_sigma(text):
    if text is None:
        return None
    if text == "from-initial":
        return "from-initial"
    parts = text.split(",")
    try:
        si, se = (float(p) for p in parts)
    except ValueError:
        raise ConfigurationError(
            "--emi-sigma wants 'from-initial' or '<intra>,<extra>' in "
            f"µS/µm, got {text!r}") from None
    return (si, se)


def _load_scenario(args):
    if args.config and args.scenario:
        raise ConfigurationError("give --scenario or --config, not both")
    if args.config:
        cfg = config.load_file(args.config)
    elif args.scenario:
        cfg = scenarios.builtin_scenario(args.scenario)
    else:
        raise ConfigurationError("one of --scenario or --config is needed")
    return scenarios.with_overrides(
        cfg,
        dt_ms=getattr(args, "dt_ms", None),
        end_ms=getattr(args, "end_ms", None),
        snapshot_every_ms=_parse_snapshot_every(
            getattr(args, "snapshot_every", None)),
        emi_sigma=_parse_emi_sigma(getattr(args, "emi_sigma", None)))


def _add_scenario_args(sub, snapshots=True):
    sub.add_argument("--scenario", help="builtin scenario name "
                     "(" + ", ".join(scenarios.builtin_names()) + ")")
    sub.add_argument("--config", help="TOML scenario file")
    sub.add_argument("--out-dir", default="out", help="output directory")
    sub.add_argument("--dt-ms", type=float, default=None,
                     help="override the time step (ms)")
    sub.add_argument("--end-ms", type=float, default=None,
                     help="override the end time (ms)")
    if snapshots:
        sub.add_argument("--snapshot-every", default=None, metavar="MS",
                         help="field snapshot cadence, e.g. 1ms (0 = off)")
    sub.add_argument("--emi-sigma", default=None, metavar="SIGMA",
                     help="comparison conductivities: 'from-initial' or "
                     "'<intra>,<extra>' in µS/µm")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="knpemi",
        description="Finite element ionic electrodiffusion with explicit "
        "cell geometries")
    parser.add_argument("--seedless", action="store_true",
                        help="reserved; the pipeline uses no randomness")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="simulate one scenario")
    _add_scenario_args(p_run)
    p_run.add_argument("--framework", choices=("knp", "emi"), default="knp",
                       help="electrodiffusion (knp) or fixed-conductivity "
                       "comparison (emi) solver")

    p_conv = sub.add_parser("converge",
                            help="manufactured-solution refinement study")
    p_conv.add_argument("--levels", default="8,16,32,64",
                        help="mesh series, e.g. 8,16,32,64")
    p_conv.add_argument("--out-dir", default="out", help="output directory")

    p_cmp = sub.add_parser("compare",
                           help="paired electrodiffusion vs fixed-"
                           "conductivity run")
    _add_scenario_args(p_cmp)

    p_probe = sub.add_parser("probe",
                             help="re-extract series from run snapshots")
    p_probe.add_argument("--run-dir", required=True,
                         help="directory with a run manifest")
    p_probe.add_argument("--manifest", default="manifest.json",
                         help="manifest file name inside --run-dir")
    p_probe.add_argument("--field", required=True,
                         help="snapshot field, e.g. phi_e or Na_e")
    p_probe.add_argument("--at", action="append", required=True,
                         metavar="X,Y[,Z]", help="probe coordinates in µm "
                         "(repeatable)")
    p_probe.add_argument("--out", default=None,
                         help="write CSV here instead of stdout")
    return parser


def _cmd_run(args):
    cfg = _load_scenario(args)
    manifest = runner.run_scenario(cfg, args.out_dir,
                                   framework=args.framework)
    stats = manifest["solver_stats"]
    print(f"scenario {cfg.name} ({args.framework}): {manifest['steps']} "
          f"steps, {stats['dofs']} dofs, {manifest['wall_time_s']} s")
    print(f"wrote {Path(args.out_dir) / manifest['probes_csv']}"
          + (f" and {len(manifest['snapshots'])} snapshots"
             if manifest["snapshots"] else ""))
    return 0


def _cmd_converge(args):
    levels = runner.parse_levels(args.levels)

    def progress(level):
        print(f"  level n={level.n} done ({level.num_steps} steps)",
              file=sys.stderr)

    report, table = runner.converge(levels, args.out_dir, progress=progress)
    print(table, end="")
    print(f"wrote {Path(args.out_dir) / 'convergence.csv'} and table.txt")
    return 0


def _cmd_compare(args):
    cfg = _load_scenario(args)
    sigma = None
    if _parse_emi_sigma(getattr(args, "emi_sigma", None)) not in (
            None, "from-initial"):
        si, se = _parse_emi_sigma(args.emi_sigma)
        sigma = (si * scenarios.US_PER_UM, se * scenarios.US_PER_UM)
    report = runner.compare_frameworks(cfg, args.out_dir, sigma=sigma)
    print(f"scenario {cfg.name}: max |phi_e(knp) - phi_e(emi)| = "
          f"{report['max_abs_phi_e_diff_mV']:.4g} mV at "
          f"t = {report['end_time_ms']:.6g} ms")
    print(f"wrote compare.csv, profile.csv, report.json in {args.out_dir}")
    return 0


def _cmd_probe(args):
    run_dir = Path(args.run_dir)
    manifest_path = run_dir / args.manifest
    if not manifest_path.exists():
        raise ConfigurationError(f"no manifest at {manifest_path}")
    manifest = output.read_manifest(manifest_path)
    snapshots = manifest.get("snapshots", [])
    if not snapshots:
        raise ConfigurationError(
            "the run wrote no snapshots; rerun with --snapshot-every")
    points = []
    for text in args.at:
        try:
            points.append(tuple(float(v) for v in text.split(",")))
        except ValueError:
            raise ConfigurationError(
                f"--at wants comma-separated µm coordinates, got {text!r}") \
                from None
    records = []
    for snap in snapshots:
        grid = output.read_vtk(run_dir / snap["file"])
        for pt in points:
            value = output.probe_grid(grid, args.field, [pt])[0]
            pid = "at(" + ",".join("%g" % v for v in pt) + ")"
            records.append(output.ProbeRecord(
                time_ms=snap["time_ms"], probe=pid, field=args.field,
                value=float(value)))
    if args.out:
        output.write_probes(records, args.out)
        print(f"wrote {args.out}")
    else:
        print(",".join(output.PROBE_HEADER))
        for rec in records:
            print(f"{output.FLOAT_FMT % rec.time_ms},{rec.probe},"
                  f"{rec.field},{output.FLOAT_FMT % rec.value}")
    return 0


_COMMANDS = {
    "run": _cmd_run,
    "converge": _cmd_converge,
    "compare": _cmd_compare,
    "probe": _cmd_probe,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.seedless:
            raise ConfigurationError(
                "--seedless is reserved: the pipeline is deterministic "
                "and seeds nothing")
        return _COMMANDS[args.command](args)
    except (ConfigurationError, GeometryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except InstabilityError as exc:
        print(f"instability: {exc}", file=sys.stderr)
        return 4
    except SolverError as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
