"""
Test cases for the command-line surface and its exit codes.
"""

import json

import pytest

from binflow.errors import EXIT_MISSING_INPUT, EXIT_OK, EXIT_USAGE
from binflow.main import UsageError, main, parse_objective

TINY_TOY = ["--steps", "4", "--batch", "8", "--dim", "2", "--hidden", "8", "--ber-bits", "20", "--bins", "4"]


def test_missing_out_is_usage_error():
    """Test a missing required flag exits 2"""
    assert main(["toy", "--steps", "1"]) == EXIT_USAGE


def test_unknown_flag_is_usage_error(tmp_path):
    """Test an unrecognized flag exits 2"""
    assert main(["toy", "--out", str(tmp_path), "--warp", "9"]) == EXIT_USAGE


def test_v_pred_bce_is_usage_error(tmp_path):
    """Test the forbidden pairing is rejected before training"""
    assert main(["toy", "--out", str(tmp_path), "--pred", "v", "--loss", "bce"]) == EXIT_USAGE
    assert not (tmp_path / "manifest.json").exists()


def test_non_positive_scale_is_usage_error(tmp_path):
    """Test s <= 0 for analysis and training"""
    assert main(["analyze", "--s", "0", "--report", str(tmp_path / "r.json")]) == EXIT_USAGE
    assert main(["toy", "--out", str(tmp_path), "--sampler", "logitnormal", "--s", "-1"]) == EXIT_USAGE


def test_map_size_limit_is_usage_error(tmp_path):
    """Test MAP on an oversized system needs --map false"""
    assert main(["mimo", "--out", str(tmp_path), "--n", "9"]) == EXIT_USAGE


def test_missing_dataset_exit_code(tmp_path):
    """Test absent IDX files exit 3"""
    code = main(["bmnist", "--out", str(tmp_path / "out"), "--images", str(tmp_path / "imgs"),
                 "--labels", str(tmp_path / "lbls")])
    assert code == EXIT_MISSING_INPUT


def test_analyze_report(tmp_path):
    """Test the JSON report and its manifest"""
    report = tmp_path / "analysis" / "binary.json"
    assert main(["analyze", "--case", "binary", "--s", "0.8", "--report", str(report)]) == EXIT_OK
    payload = json.loads(report.read_text())
    assert abs(payload["u_peak"] - 2.56) <= 1e-3
    assert abs(payload["slope_integrand"] + 4.0) < 0.05
    manifest = json.loads((report.parent / "manifest.json").read_text())
    assert manifest["command"] == "analyze"
    assert manifest["outputs"] == ["binary.json"]


def test_toy_run_writes_manifest(tmp_path):
    """Test a tiny single-cell run and its manifest"""
    out = tmp_path / "toy"
    assert main(["toy", "--out", str(out), "--pred", "x", "--loss", "bce"] + TINY_TOY) == EXIT_OK
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["command"] == "toy"
    assert manifest["config"]["steps"] == 4
    assert "summary.csv" in manifest["outputs"]
    assert "x_pred-bce__uniform/trace.csv" in manifest["outputs"]
    assert manifest["divergence_events"] == {}
    assert (out / "x_pred-bce__uniform" / "ber_t0.csv").exists()


def test_config_file_precedence(tmp_path):
    """Test file values override defaults and flags override the file"""
    config = tmp_path / "recipe.cfg"
    config.write_text(f"# tiny recipe\nout = {tmp_path / 'run'}\nsteps = 3\nbatch = 4\ndim=2\n"
                      "hidden = 8\nber-bits = 20\nbins = 4\n")
    assert main(["toy", "--config", str(config), "--steps", "2"]) == EXIT_OK
    manifest = json.loads((tmp_path / "run" / "manifest.json").read_text())
    assert manifest["config"]["steps"] == 2
    assert manifest["config"]["batch"] == 4
    assert manifest["config"]["D"] == 2


def test_config_file_errors(tmp_path):
    """Test unknown keys, bad choices and a missing file"""
    config = tmp_path / "bad.cfg"
    config.write_text("warp = 9\n")
    assert main(["toy", "--out", str(tmp_path), "--config", str(config)]) == EXIT_USAGE
    config.write_text("data = images\n")
    assert main(["toy", "--out", str(tmp_path), "--config", str(config)]) == EXIT_USAGE
    assert main(["toy", "--out", str(tmp_path), "--config", str(tmp_path / "none.cfg")]) == EXIT_MISSING_INPUT


def test_parse_objective():
    """Test objective names parse into configs"""
    objective = parse_objective("x_pred-v_mse")
    assert (objective.prediction, objective.loss) == ("x_pred", "v_mse")
    with pytest.raises(UsageError):
        parse_objective("xmse")


def test_version_flag(capsys):
    """Test --version exits cleanly"""
    assert main(["--version"]) == EXIT_OK
    assert "binflow" in capsys.readouterr().out
