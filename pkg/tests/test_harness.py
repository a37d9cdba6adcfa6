from __future__ import annotations

import json
import subprocess
import sys

import numpy as np
import pytest

from magdiff import RunConfig, ValidationError
from magdiff.harness import (
    EXIT_OK,
    EXIT_SOLVER,
    EXIT_VALIDATION,
    cmd_cell_problem,
    cmd_convergence,
    cmd_diffusion_matrix,
    cmd_expansion_study,
    cmd_kinetic,
    cmd_macro,
    fit_loglog,
    main,
)

SMALL_GRID = {"n_radial": 4, "n_angle": 8, "n_parallel": 6, "kinetic_n_radial": 4,
              "kinetic_n_angle": 8, "kinetic_n_parallel": 6}


def _cfg(**kw) -> RunConfig:
    return RunConfig.from_dict(kw)


def _write(tmp_path, payload, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(payload))
    return path


# ---------------------------------------------------------------------------
# fits


def test_fit_loglog_recovers_power_law():
    x = np.array([0.8, 0.4, 0.2, 0.1])
    fit = fit_loglog(x, 3.0 * x**4)
    assert fit["slope"] == pytest.approx(4.0, abs=1e-12)
    assert fit["intercept"] == pytest.approx(np.log(3.0), abs=1e-12)
    assert fit["residual_rms"] < 1e-12
    assert fit["n_points"] == 4 and fit["dropped"] == 0


def test_fit_loglog_reports_residual_and_drops_bad_points():
    fit = fit_loglog([1.0, 2.0, 4.0, 8.0], [1.0, 2.5, 3.5, 0.0])
    assert fit["dropped"] == 1 and fit["n_points"] == 3
    assert fit["residual_rms"] > 0.05
    assert fit_loglog([1.0], [1.0]) is None
    assert fit_loglog([1.0, 2.0], [0.0, 1.0]) is None


# ---------------------------------------------------------------------------
# configuration


@pytest.mark.parametrize("payload,field", [
    ({"eta": []}, "eta"),
    ({"eta": [0.5, -1.0]}, "eta"),
    ({"eps": "small"}, "eps"),
    ({"n_radial": 0}, "n_radial"),
    ({"n_angle": 2.5}, "n_angle"),
    ({"v_max_perp": -1.0}, "v_max_perp"),
    ({"cross_section": "hard_spheres"}, "cross_section"),
    ({"cross_section": "tabulated"}, "cross_section_params"),
    ({"geometry": "torus"}, "geometry"),
    ({"geometry": "perp_xy", "n_cells": [8], "domain_lengths": [2.0, 2.0]}, "n_cells"),
    ({"potential": "yukawa"}, "potential"),
    ({"macro_refine": 4}, "macro_refine"),
    ({"snapshot_times": [1.0], "t_final": 0.5}, "snapshot_times"),
    ({"diffusion_matrix": [[1, 0], [0, 1]]}, "diffusion_matrix"),
    ({"implicit": "yes"}, "implicit"),
    ({"etta": [0.5]}, "etta"),
])
def test_config_validation_names_field(payload, field):
    with pytest.raises(ValidationError) as exc:
        RunConfig.from_dict(payload)
    assert exc.value.field == field
    assert field in str(exc.value)


def test_config_defaults_and_overrides(tmp_path):
    cfg = RunConfig.load(_write(tmp_path, {"eta": 0.5}), {"workers": 3})
    assert cfg.eta == [0.5] and cfg.workers == 3
    assert RunConfig.from_dict({}).cross_section == "gauss_mix"


def test_config_load_errors(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ValidationError):
        RunConfig.load(bad)
    with pytest.raises(ValidationError):
        RunConfig.load(tmp_path / "missing.json")
    with pytest.raises(ValidationError):
        RunConfig.load(_write(tmp_path, [1, 2]))


# ---------------------------------------------------------------------------
# commands


def test_cell_problem_relaxation(tmp_path):
    cfg = _cfg(cross_section="constant", cross_section_params={"tau": 2.0}, eta=[0.5, 1.0])
    report = cmd_cell_problem(cfg, tmp_path)
    for entry in report["cells"]:
        assert entry["relaxation_xz_relative_error"] < 1e-12
        assert (tmp_path / f"cell_eta_{entry['eta']:g}.json").exists()
    assert (tmp_path / "report.json").exists()


def test_diffusion_matrix_relaxation(tmp_path):
    cfg = _cfg(cross_section="constant", eta=[0.5, 1.0, 2.0])
    report = cmd_diffusion_matrix(cfg, tmp_path)
    for entry in report["tensors"]:
        assert entry["relaxation_max_relative_error"] < 1e-3
        assert entry["positive_definite"]
    assert report["config"]["eta"] == [0.5, 1.0, 2.0]
    assert "grid_deficit" in report
    assert (tmp_path / "diffusion_sweep.csv").exists()


def test_diffusion_matrix_gauss_mix(tmp_path):
    report = cmd_diffusion_matrix(_cfg(eta=[0.5]), tmp_path)
    entry = report["tensors"][0]
    assert entry["positive_definite"]
    assert entry["adjoint_max_difference"] < 1e-12


def test_expansion_study_relaxation_and_single_eta(tmp_path):
    report = cmd_expansion_study(_cfg(cross_section="constant", eta=[0.5]), tmp_path)
    assert report["slopes"] == {}
    row = report["rows"][0]
    assert row["r_z"] < 1e-12
    assert np.isfinite(row["r_perp"])
    lines = (tmp_path / "expansion_table.csv").read_text().splitlines()
    assert lines[0].startswith("eta,r_z,r_perp")
    assert len(lines) == 2


def test_expansion_study_slopes(tmp_path):
    report = cmd_expansion_study(_cfg(eta=[0.4, 0.2, 0.1]), tmp_path)
    fit = report["slopes"]["r_perp"]
    assert fit["slope"] == pytest.approx(4.0, abs=0.5)
    assert "residual_rms" in fit


def test_kinetic_command(tmp_path):
    cfg = _cfg(**SMALL_GRID, n_cells=[16], t_final=0.02, snapshot_times=[0.0, 0.02], eps=[0.2],
               eta=[0.5], dump_field=True)
    report = cmd_kinetic(cfg, tmp_path)
    assert report["mass_max_drift"] <= 1e-12 * report["mass_initial"]
    assert report["entropy_max_increase"] <= 1e-12
    assert len(report["snapshot_files"]) == 3
    header = (tmp_path / "kinetic_history.csv").read_text().splitlines()[0]
    assert header == "t,mass,J_x,J_y,J_z,entropy,deviation"


def test_macro_command_variance_oracle(tmp_path):
    cfg = _cfg(**SMALL_GRID, equation="guiding_center", n_cells=[256], domain_lengths=[10.0], d_z=1.0,
               snapshot_times=[0.0, 0.25, 0.5])
    report = cmd_macro(cfg, tmp_path)
    assert report["variance"]["relative_error"] < 0.02
    assert len(report["snapshot_files"]) == 3
    assert report["mass_max_drift"] < 1e-12


def test_convergence_single_eps(tmp_path):
    cfg = _cfg(**SMALL_GRID, n_cells=[16], t_final=0.02, eps=[0.2], eta=[0.5], macro_refine=3)
    report = cmd_convergence(cfg, tmp_path)
    assert report["fit"] is None
    row = report["rows"][0]
    assert np.isfinite(row["final_error"]) and row["final_error"] > 0
    assert row["mass_max_drift"] < 1e-12


def test_convergence_perp_pairs_eps_with_eta(tmp_path):
    cfg = _cfg(**SMALL_GRID, geometry="perp_xy", n_cells=[4, 4], domain_lengths=[2.0, 2.0],
               potential="uniform", potential_params={"ex": 1.0, "ey": 0.5}, eps=[0.3],
               eta=[0.3], perp_horizon_eps2=2.0)
    report = cmd_convergence(cfg, tmp_path)
    row = report["rows"][0]
    assert row["eta"] == 0.3
    assert report["drift_reference"] == [0.5, -1.0]
    assert np.isfinite(row["velocity_relative_error"])


# ---------------------------------------------------------------------------
# CLI


def test_cli_success_and_determinism(tmp_path, capsys):
    cfg = _write(tmp_path, {"cross_section": "constant", "eta": [0.5, 1.0], **SMALL_GRID})
    outs = [tmp_path / "a", tmp_path / "b"]
    for out, workers in zip(outs, ("1", "2")):
        assert main(["diffusion-matrix", "--config", str(cfg), "--out", str(out), "--workers", workers]) == EXIT_OK
    summary = json.loads(capsys.readouterr().out.split("\n}\n")[0] + "\n}")
    assert summary["command"] == "diffusion-matrix"
    a, b = ((o / "diffusion_sweep.csv").read_bytes() for o in outs)
    assert a == b


def test_cli_kinetic_outputs_reproducible(tmp_path):
    cfg = _write(tmp_path, {**SMALL_GRID, "n_cells": [8], "t_final": 0.01, "snapshot_times": [0.01]})
    for name in ("a", "b"):
        assert main(["kinetic", "--config", str(cfg), "--out", str(tmp_path / name)]) == EXIT_OK
    for f in ("snapshot_0000.csv", "kinetic_history.csv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_cli_validation_exit_code(tmp_path, capsys):
    cfg = _write(tmp_path, {"eta": []})
    assert main(["diffusion-matrix", "--config", str(cfg), "--out", str(tmp_path)]) == EXIT_VALIDATION
    assert "eta" in capsys.readouterr().err


def test_cli_malformed_config_exit_code(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("[")
    assert main(["kinetic", "--config", str(bad), "--out", str(tmp_path)]) == EXIT_VALIDATION


def test_cli_solver_failure_exit_code(tmp_path, capsys):
    # an explicit step far above the stability bound of the macroscopic scheme
    cfg = _write(tmp_path, {**SMALL_GRID, "equation": "drift_diffusion", "diffusion_matrix": np.eye(3).tolist(),
                            "dt": 0.5, "t_final": 1.0})
    assert main(["macro", "--config", str(cfg), "--out", str(tmp_path)]) == EXIT_SOLVER
    assert "stability" in capsys.readouterr().err


def test_cli_module_entry_point(tmp_path):
    cfg = _write(tmp_path, {"eps": [0.0]})
    proc = subprocess.run([sys.executable, "-m", "magdiff", "kinetic", "--config", str(cfg),
                           "--out", str(tmp_path)], capture_output=True, text=True)
    assert proc.returncode == EXIT_VALIDATION
    assert "eps" in proc.stderr
