"""Command-line behaviour: artefacts, determinism, exit codes."""

import json

import pytest

from knpemi import cli, config, output
from knpemi.errors import SolverError

MINI = """\
name = "mini"
dimension = 2
boundary = "clamped"
dt_ms = 0.05
end_ms = 0.1
phi_m0_mV = -67.74

[domain]
box_um = [[0.0, 4.0], [0.0, 3.0]]
resolution = [4, 3]

[[cell]]
label = 1
box_um = [[1.0, 3.0], [1.0, 2.0]]

[[species]]
name = "Na"
z = 1
D_um2_per_ms = 1.33
init_i_mM = 12.0
init_e_mM = 100.0

[[species]]
name = "K"
z = 1
D_um2_per_ms = 1.96
init_i_mM = 125.0
init_e_mM = 4.0

[[species]]
name = "Cl"
z = -1
D_um2_per_ms = 2.03
init_i_mM = 137.0
init_e_mM = 104.0

[membrane]
model = "passive"

[membrane.g_leak_mS_per_cm2]
Na = 0.2
K = 0.8
Cl = 0.0

[stimulus]
g_syn_mS_per_cm2 = 125.0
alpha_ms = 1.0
onsets_ms = [0.0]
window_x_um = [1.0, 2.0]

[[probe]]
id = "memb"
point_um = [2.0, 2.0]
fields = ["phi_m", "E_Na", "I_M"]

[[probe]]
id = "outside"
point_um = [0.5, 0.5]
fields = ["phi_e", "Na_e"]

[[probe]]
id = "inside"
point_um = [2.0, 1.5]
fields = ["Na_i", "phi_i"]
"""


@pytest.fixture()
def mini_config(tmp_path):
    path = tmp_path / "mini.toml"
    path.write_text(MINI)
    return path


def run_cli(*argv):
    return cli.main([str(a) for a in argv])


def test_run_writes_probes_snapshots_manifest(mini_config, tmp_path):
    out = tmp_path / "out"
    code = run_cli("run", "--config", mini_config, "--out-dir", out,
                   "--snapshot-every", "0.05ms")
    assert code == 0
    records = output.read_probes(out / "probes.csv")
    # 3 probes x (2|2|2) fields x 3 times
    assert len(records) == 7 * 3
    times = {}
    for rec in records:
        key = (rec.probe, rec.field)
        assert times.get(key, -1.0) < rec.time_ms or rec.time_ms == 0.0
        times[key] = max(times.get(key, -1.0), rec.time_ms)
    assert all(t == pytest.approx(0.1) for t in times.values())

    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["scenario"] == "mini"
    assert manifest["steps"] == 2
    assert len(manifest["snapshots"]) == 3
    # the config echo reloads equal to what actually ran (file + override)
    from knpemi.scenarios import with_overrides

    echoed = config.loads(manifest["config_toml"])
    assert echoed == with_overrides(config.load_file(mini_config),
                                    snapshot_every_ms=0.05)

    grid = output.read_vtk(out / manifest["snapshots"][0]["file"])
    assert set(grid.point_data) == {"phi_i", "phi_e", "Na_i", "Na_e",
                                    "K_i", "K_e", "Cl_i", "Cl_e"}
    # fixed exterior concentration at t = 0 everywhere extracellular
    na_e = grid.point_data["Na_e"]
    import numpy as np
    assert np.nanmax(na_e) == pytest.approx(100.0)
    assert np.nanmin(na_e) == pytest.approx(100.0)


def test_identical_runs_are_byte_identical(mini_config, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run_cli("run", "--config", mini_config, "--out-dir", a,
                   "--snapshot-every", "0.1ms") == 0
    assert run_cli("run", "--config", mini_config, "--out-dir", b,
                   "--snapshot-every", "0.1ms") == 0
    assert (a / "probes.csv").read_bytes() == (b / "probes.csv").read_bytes()
    assert (a / "snap_0001.vtk").read_bytes() \
        == (b / "snap_0001.vtk").read_bytes()


def test_snapshot_probe_matches_in_memory_value(mini_config, tmp_path,
                                                capsys):
    out = tmp_path / "out"
    run_cli("run", "--config", mini_config, "--out-dir", out,
            "--snapshot-every", "0.05ms")
    capsys.readouterr()
    code = run_cli("probe", "--run-dir", out, "--field", "Na_i",
                   "--at", "2,1.5")
    assert code == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0] == "time_ms,probe,field,value"
    extracted = {float(ln.split(",")[0]): float(ln.split(",")[-1])
                 for ln in lines[1:]}
    in_memory = {rec.time_ms: rec.value
                 for rec in output.read_probes(out / "probes.csv")
                 if rec.probe == "inside" and rec.field == "Na_i"}
    assert set(extracted) == set(in_memory)
    for t, v in extracted.items():
        assert v == pytest.approx(in_memory[t], rel=1e-9)


def test_emi_framework_run_skips_concentration_probes(mini_config, tmp_path):
    out = tmp_path / "emi"
    code = run_cli("run", "--config", mini_config, "--out-dir", out,
                   "--framework", "emi", "--emi-sigma", "2.01,1.31")
    assert code == 0
    records = output.read_probes(out / "probes.csv")
    fields = {rec.field for rec in records}
    assert "phi_m" in fields and "phi_e" in fields and "E_Na" in fields
    assert "Na_i" not in fields and "Na_e" not in fields
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["sigma_S_per_m"] == [2.01, 1.31]


def test_compare_writes_paired_artifacts(mini_config, tmp_path):
    out = tmp_path / "cmp"
    code = run_cli("compare", "--config", mini_config, "--out-dir", out)
    assert code == 0
    report = json.loads((out / "report.json").read_text())
    assert report["max_abs_phi_e_diff_mV"] >= 0.0
    assert (out / "compare.csv").exists()
    header = (out / "compare.csv").read_text().splitlines()[0]
    assert header == "time_ms,probe,field,knp,emi,diff"


def test_unknown_scenario_exits_2(capsys):
    assert run_cli("run", "--scenario", "Z") == 2
    assert "unknown scenario" in capsys.readouterr().err


def test_scenario_and_config_together_exit_2(mini_config, capsys):
    assert run_cli("run", "--scenario", "A", "--config", mini_config) == 2
    assert "not both" in capsys.readouterr().err


def test_bad_override_exits_2(mini_config, capsys):
    assert run_cli("run", "--config", mini_config, "--end-ms", "0.07") == 2
    assert "not a multiple" in capsys.readouterr().err


def test_seedless_is_rejected(capsys):
    assert run_cli("--seedless", "converge", "--levels", "8") == 2
    assert "reserved" in capsys.readouterr().err


def test_bad_levels_exit_2(capsys):
    assert run_cli("converge", "--levels", "7,14") == 2
    assert "refinement series" in capsys.readouterr().err


def test_instability_exits_4(mini_config, tmp_path, capsys):
    import numpy as np

    hh = MINI.replace(
        'model = "passive"',
        'model = "hodgkin-huxley"\ngating_init = [0.0379, 0.688, 0.276]')
    hh = hh.replace("[membrane.g_leak_mS_per_cm2]",
                    "[membrane.g_bar_mS_per_cm2]")
    hh = hh.replace('boundary = "clamped"\ndt_ms = 0.05\nend_ms = 0.1',
                    'boundary = "clamped"\ndt_ms = 1000.0\nend_ms = 1000.0')
    hh = hh.replace("Na = 0.2\nK = 0.8\nCl = 0.0",
                    "Na = 120.0\nK = 36.0\nCl = 0.3\n")
    path = tmp_path / "hh.toml"
    path.write_text(hh)
    with np.errstate(over="ignore", invalid="ignore"):
        code = run_cli("run", "--config", path, "--out-dir",
                       tmp_path / "boom")
    assert code == 4
    assert "instability" in capsys.readouterr().err


def test_solver_failure_exits_3(mini_config, tmp_path, capsys, monkeypatch):
    def explode(*args, **kwargs):
        raise SolverError("factorization failed")

    monkeypatch.setattr(cli.runner, "run_scenario", explode)
    code = run_cli("run", "--config", mini_config, "--out-dir", tmp_path)
    assert code == 3
    assert "solver failure" in capsys.readouterr().err


def test_probe_without_snapshots_exits_2(mini_config, tmp_path, capsys):
    out = tmp_path / "nosnap"
    run_cli("run", "--config", mini_config, "--out-dir", out)
    capsys.readouterr()
    code = run_cli("probe", "--run-dir", out, "--field", "phi_e",
                   "--at", "1,1")
    assert code == 2
    assert "snapshot" in capsys.readouterr().err


def test_gating_init_in_toml_round_trips(tmp_path):
    from knpemi.scenarios import builtin_scenario

    cfg = builtin_scenario("D-reduced")
    text = config.dumps(cfg)
    assert "gating_init = [0.0379, 0.688, 0.276]" in text
    assert config.loads(text) == cfg
