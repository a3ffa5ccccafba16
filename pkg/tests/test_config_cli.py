import json
import os
from pathlib import Path

import pytest

from mvcascade.cli import main
from mvcascade.config import apply_overrides, config_hash, dumps, load_config, spec_from_config
from mvcascade.model import spec_to_dict

ROOT = Path(__file__).resolve().parents[1]
CONFIGS = ROOT / "configs"


def run_cli(args, out, capsys):
    code = main(list(args) + ["--out", str(out)])
    run_dir = Path(capsys.readouterr().out.strip().splitlines()[-1])
    return code, run_dir


# ---------------------------------------------------------------- config layer


def test_overrides_dotted_and_indexed():
    cfg, _ = load_config(CONFIGS / "homogeneous.toml")
    out = apply_overrides(cfg, ["solver.dt=1e-4", "model.atoms.0.v=[0.7]", "solver.dt=2e-4",
                                "solver.boundary=truncate"])
    assert out["solver"]["dt"] == 2e-4  # last writer wins
    assert out["model"]["atoms"][0]["v"] == [0.7]
    assert out["solver"]["boundary"] == "truncate"
    assert cfg["solver"]["dt"] == 0.001  # input untouched


def test_override_syntax_error():
    with pytest.raises(ValueError):
        apply_overrides({}, ["solver.dt"])


def test_config_hash_is_byte_hash():
    raw = (CONFIGS / "homogeneous.toml").read_bytes()
    assert config_hash(raw) == config_hash(bytes(raw))
    assert config_hash(raw) != config_hash(raw + b"\n")
    assert len(config_hash(raw)) == 12


def test_effective_config_round_trip(tmp_path):
    cfg, _ = load_config(CONFIGS / "core_periphery.toml")
    p = tmp_path / "echo.toml"
    p.write_text(dumps(cfg))
    again, _ = load_config(p)
    assert again == cfg
    assert spec_to_dict(spec_from_config(again)) == spec_to_dict(spec_from_config(cfg))


def test_missing_model_table(tmp_path):
    p = tmp_path / "x.toml"
    p.write_text("seed = 1\n")
    with pytest.raises(ValueError):
        load_config(p)


# ---------------------------------------------------------------- exit codes


def test_validate_shipped_config(tmp_path, capsys):
    code, d = run_cli(["validate", "--config", str(CONFIGS / "homogeneous.toml")], tmp_path, capsys)
    assert code == 0
    assert json.loads((d / "validation_report.json").read_text())["violations"] == []


def test_validate_invalid_spec_exits_2(tmp_path, capsys):
    code, d = run_cli(["validate", "--config", str(CONFIGS / "homogeneous.toml"),
                       "--set", "model.atoms.0.p=0.6"], tmp_path, capsys)
    assert code == 2
    rep = json.loads((d / "validation_report.json").read_text())
    assert rep["violations"][0]["code"] == "normalization"
    code, _ = run_cli(["solve-meanfield", "--config", str(CONFIGS / "homogeneous.toml"),
                       "--set", "model.atoms.0.p=0.6"], tmp_path, capsys)
    assert code == 2


def test_check_smallness_failure_exits_3(tmp_path, capsys):
    code, d = run_cli(["check-smallness", "--config", str(CONFIGS / "smallness_fail.toml")],
                      tmp_path, capsys)
    assert code == 3
    assert json.loads((d / "smallness_report.json").read_text())["bound_value"] == pytest.approx(2.0)


def test_budget_exceeded_exits_4_with_partial_output(tmp_path, capsys):
    code, d = run_cli(["simulate-particles", "--config", str(CONFIGS / "homogeneous.toml"),
                       "--set", "particles.n=100", "--set", "particles.budget=10000"], tmp_path, capsys)
    assert code == 4
    summary = json.loads((d / "summary.json").read_text())
    assert summary["budget_exceeded"] and summary["completed_horizon"] == pytest.approx(0.1)
    assert len((d / "losses.csv").read_text().splitlines()) == 102


@pytest.mark.parametrize("argv", [["bogus", "--config", "x.toml"], ["validate"],
                                  ["validate", "--config", "/nonexistent/file.toml"],
                                  ["validate", "--config", "c.toml", "--jobs", "many"]])
def test_usage_errors_exit_64(argv, tmp_path):
    with pytest.raises(SystemExit) as ei:
        main(argv + ["--out", str(tmp_path)])
    assert ei.value.code == 64


def test_rho_shortcut_and_seed(tmp_path, capsys):
    code, d = run_cli(["solve-meanfield", "--config", str(CONFIGS / "homogeneous.toml"),
                       "--rho", "0.3", "--seed", "5", "--set", "model.horizon=0.1",
                       "--set", "solver.snapshot_times=[]"], tmp_path, capsys)
    assert code == 0
    eff, _ = load_config(d / "effective_config.toml")
    assert eff["model"]["coefficients"]["rho"] == 0.3 and eff["seed"] == 5
    man = json.loads((d / "manifest.json").read_text())
    assert man["seed"] == 5 and "model.coefficients.rho=0.3" in man["overrides"]


def test_output_root_from_environment(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("MVCASCADE_OUT", str(tmp_path / "envroot"))
    code = main(["check-smallness", "--config", str(CONFIGS / "homogeneous.toml")])
    d = Path(capsys.readouterr().out.strip())
    assert code == 0 and d.parent == tmp_path / "envroot"


def test_solve_twice_is_byte_identical_and_manifest_complete(tmp_path, capsys):
    args = ["solve-meanfield", "--config", str(CONFIGS / "homogeneous.toml"), "--rho", "0",
            "--seed", "7", "--set", "model.horizon=0.2", "--set", "solver.snapshot_times=[0.1]"]
    code1, d1 = run_cli(args, tmp_path, capsys)
    code2, d2 = run_cli(args, tmp_path, capsys)
    assert code1 == code2 == 0 and d1 != d2
    assert (d1 / "losses.csv").read_bytes() == (d2 / "losses.csv").read_bytes()
    man = json.loads((d1 / "manifest.json").read_text())
    on_disk = sorted(os.listdir(d1))
    assert man["files"] == on_disk
    assert "density_t0.100000.csv" in on_disk
    assert d1.name.endswith(man["config_hash"]) or d1.name.rsplit("-", 1)[0].endswith(man["config_hash"])
    text = (d1 / "losses.csv").read_bytes()
    assert b"\r" not in text and text.startswith(b"t,L_1,jump_flag,rounds\n")
