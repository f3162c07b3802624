import hashlib
import json

import numpy as np
import pytest

from coneglue.cli import (ConfigError, EXPERIMENTS, emit_convergence_tables,
                          main, parse_config, run_experiment)


def write_cfg(tmp_path, name, extra="", grid="nt = 16\nntheta = 8\n"
              "r_min = 1\nr_max = 10\n"):
    path = tmp_path / f"{name}.cfg"
    path.write_text(f"[experiment]\nname = {name}\nseed = 0\n"
                    f"output_dir = {tmp_path / 'out'}\n"
                    f"[grid]\n{grid}{extra}")
    return path


# -- config parsing ------------------------------------------------------------

def test_parse_defaults(tmp_path):
    cfg = parse_config(write_cfg(tmp_path, "localize"))
    assert cfg.name == "localize"
    assert cfg.p == 0.75 and cfg.N == 12 and cfg.n == 3
    assert cfg.nt == 16 and cfg.r_max == 10.0


def test_parse_rejects_unknown_experiment(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("[experiment]\nname = bogus\n")
    with pytest.raises(ConfigError, match="operators-check"):
        parse_config(path)


def test_parse_rejects_p_out_of_range(tmp_path):
    path = write_cfg(tmp_path, "localize", extra="[weights]\np = 2\n")
    with pytest.raises(ConfigError, match=r"\(0\.5, 1\.0\)"):
        parse_config(path)


def test_parse_rejects_small_N(tmp_path):
    path = write_cfg(tmp_path, "localize", extra="[weights]\nN = 10\n")
    with pytest.raises(ConfigError, match="n \\+ 8"):
        parse_config(path)


def test_parse_rejects_bad_eps(tmp_path):
    path = write_cfg(tmp_path, "nbody", extra="[data]\neps = 0.7\n")
    with pytest.raises(ConfigError, match="eps"):
        parse_config(path)


def test_parse_error_cites_field(tmp_path):
    path = write_cfg(tmp_path, "localize", extra="[weights]\np = apple\n")
    with pytest.raises(ConfigError, match=r"\[weights\] p"):
        parse_config(path)


def test_parse_missing_file():
    with pytest.raises(ConfigError):
        parse_config("/nonexistent/path.cfg")


# -- CLI entry points ----------------------------------------------------------

def test_list_experiments(capsys):
    assert main(["list-experiments"]) == 0
    out = capsys.readouterr().out.split()
    assert out == list(EXPERIMENTS)


def test_validate_subcommand(tmp_path, capsys):
    path = write_cfg(tmp_path, "operators-check")
    assert main(["validate", str(path)]) == 0
    bad = write_cfg(tmp_path, "localize", extra="[weights]\np = 2\n")
    assert main(["validate", str(bad)]) == 2


def test_run_bad_config_exit_2(tmp_path):
    bad = write_cfg(tmp_path, "localize", extra="[weights]\np = 2\n")
    assert run_experiment(str(bad)) == 2


# -- experiments ---------------------------------------------------------------

def _digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def test_operators_check_run_and_determinism(tmp_path, capsys):
    path = write_cfg(tmp_path, "operators-check")
    assert run_experiment(str(path)) == 0
    out = tmp_path / "out"
    summary = json.loads((out / "summary.json").read_text())
    assert summary["schema"] == "coneglue-experiment-1"
    assert summary["passed"]
    for v in summary["results"]["residuals"].values():
        assert v <= 1e-10
    first = {f.name: _digest(f) for f in out.iterdir()}
    assert run_experiment(str(path)) == 0   # byte-identical rerun
    assert {f.name: _digest(f) for f in out.iterdir()} == first


def test_output_dir_env_override(tmp_path, monkeypatch):
    path = write_cfg(tmp_path, "operators-check")
    target = tmp_path / "elsewhere"
    monkeypatch.setenv("CONEGLUE_OUTPUT_DIR", str(target))
    assert run_experiment(str(path)) == 0
    assert (target / "summary.json").exists()
    assert not (tmp_path / "out").exists()


def test_coercivity_run(tmp_path):
    path = write_cfg(tmp_path, "coercivity",
                     grid="nt = 24\nntheta = 12\nr_min = 1\nr_max = 10\n")
    assert run_experiment(str(path)) == 0
    lines = (tmp_path / "out" / "coercivity.csv").read_text().splitlines()
    assert lines[0] == "study,nt,ntheta,vertex_z,constant"
    assert len(lines) == 6   # 2 refinement levels + 3 sweep values + header


def test_linear_solve_run(tmp_path):
    path = write_cfg(tmp_path, "linear-solve")
    assert run_experiment(str(path)) == 0
    out = tmp_path / "out"
    rep = json.loads((out / "solve_report.json").read_text())
    assert rep["schema"] == "coneglue-solve-1" and rep["converged"]
    summary = json.loads((out / "summary.json").read_text())
    assert summary["results"]["adjoint_identity_residual"] <= 1e-12


def test_localize_run_flat(tmp_path):
    path = write_cfg(tmp_path, "localize", extra="[data]\nkind = flat\n")
    assert run_experiment(str(path)) == 0
    out = tmp_path / "out"
    summary = json.loads((out / "summary.json").read_text())
    assert summary["results"]["iterations"] == 0
    assert summary["results"]["adm_energy"] == 0.0
    trace = (out / "picard_trace.csv").read_text().splitlines()
    assert trace[0].startswith("iteration,")
    assert (out / "metric.snap").exists()


def test_localize_run_schwarzschild(tmp_path):
    path = write_cfg(tmp_path, "localize",
                     grid="nt = 24\nntheta = 12\nr_min = 1\nr_max = 10\n")
    assert run_experiment(str(path)) == 0
    summary = json.loads((tmp_path / "out" / "summary.json").read_text())
    res = summary["results"]
    assert res["iterations"] > 0
    assert res["reduction"] >= 10.0
    adm = (tmp_path / "out" / "adm_table.csv").read_text().splitlines()
    assert adm[0].startswith("sigma,energy")


def test_adm_study_run(tmp_path):
    path = write_cfg(tmp_path, "adm-study",
                     grid="nt = 24\nntheta = 12\nr_min = 1\nr_max = 10\n")
    assert run_experiment(str(path)) == 0
    out = tmp_path / "out"
    adm = json.loads((out / "adm.json").read_text())
    assert adm["energy"] == pytest.approx(1.0, rel=0.01)
    trend = (out / "smallness_trend.csv").read_text().splitlines()
    assert trend[0] == "a_mag,rough_residual_norm1"
    vals = [float(line.split(",")[1]) for line in trend[1:]]
    assert vals[0] > vals[1] > vals[2]


def test_nbody_run_flat(tmp_path):
    path = write_cfg(tmp_path, "nbody", extra="[data]\nkind = flat\n")
    assert run_experiment(str(path)) == 0
    out = tmp_path / "out"
    lines = (out / "validation.json").read_text().strip().splitlines()
    good, bad = (json.loads(ln) for ln in lines)
    assert good["valid"] and not bad["valid"]
    add = json.loads((out / "additivity.json").read_text())
    assert add["additivity_mismatch"] == 0.0


def test_failed_assertion_exit_1(tmp_path):
    # demand an unattainable residual reduction: nonzero exit + failure record
    path = write_cfg(tmp_path, "localize",
                     extra="[tolerances]\nreduction_min = 1e12\n",
                     grid="nt = 24\nntheta = 12\nr_min = 1\nr_max = 10\n")
    assert run_experiment(str(path)) == 1
    summary = json.loads((tmp_path / "out" / "summary.json").read_text())
    assert not summary["passed"]
    assert summary["failure"].startswith("[picard]")


# -- convergence tables --------------------------------------------------------

def test_convergence_table_slope():
    rows = [("scalar_curv", 1.0, 4e-2), ("scalar_curv", 0.5, 1e-2)]
    lines = emit_convergence_tables(rows).strip().splitlines()
    assert lines[0] == "label,param,value,slope"
    assert len(lines) == 3
    assert float(lines[2].split(",")[3]) == pytest.approx(2.0, abs=1e-9)


def test_convergence_table_empty():
    assert emit_convergence_tables([]) == "label,param,value,slope\n"


def test_convergence_table_sweep_rows(tmp_path):
    rows = [("sweep", float(a), 1.0 / a) for a in (50, 100, 200)]
    path = tmp_path / "table.csv"
    emit_convergence_tables(rows, path)
    lines = path.read_text().strip().splitlines()
    assert len(lines) == 4
