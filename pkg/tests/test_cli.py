"""Tests for decomp.py — command dispatch, exit codes and end-to-end runs."""
from __future__ import annotations

import importlib.util
import json
from pathlib import Path

import pandas as pd
import pytest

import decomp

_spec = importlib.util.spec_from_file_location(
    "make_example", Path(__file__).parent.parent / "scripts" / "make_example.py"
)
make_example = importlib.util.module_from_spec(_spec)
_spec.loader.exec_module(make_example)


@pytest.fixture(autouse=True)
def clean_env(monkeypatch):
    monkeypatch.delenv("DECOMP_SEED", raising=False)
    monkeypatch.delenv("DECOMP_WORKERS", raising=False)


@pytest.fixture(scope="module")
def example_files(tmp_path_factory):
    """Checked-in example and golden output, or a fresh pair when they are not shipped."""
    if make_example.DATA_PATH.exists() and make_example.GOLDEN_PATH.exists():
        return make_example.DATA_PATH, make_example.GOLDEN_PATH
    root = tmp_path_factory.mktemp("example")
    data_path, golden_path = root / "example.csv", root / "golden.json"
    make_example.write_example(data_path, golden_path)
    return data_path, golden_path


def _decompose_args(path, *extra):
    return ["decompose", "--data", str(path), "--outcome", "Y", "--group", "A",
            "--mediator", "M1:continuous", "--mediator", "M2:binary", "--confounder", "C", *extra]


# ── Dispatch ────────────────────────────────────────────────


class TestDispatch:
    def test_no_command(self, capsys):
        assert decomp.main([]) == 2
        assert "Commands: decompose" in capsys.readouterr().err

    def test_unknown_command(self):
        assert decomp.main(["serve"]) == 2

    def test_missing_group(self, csv_path, capsys):
        argv = [a for a in _decompose_args(csv_path) if a not in ("--group", "A")]
        assert decomp.main(argv) == 2
        assert "error: usage:" in capsys.readouterr().err

    def test_unknown_scenario(self, capsys):
        assert decomp.main(["simulate", "--scenario", "19"]) == 2
        assert "19" in capsys.readouterr().err


# ── decompose ───────────────────────────────────────────────


class TestDecomposeCommand:
    def test_point_estimates_to_json(self, csv_path, tmp_path, capsys):
        out = tmp_path / "effects.json"
        code = decomp.main(_decompose_args(csv_path, "--K", "20", "--B", "0", "--out", str(out), "-q"))
        assert code == 0
        raw = json.loads(out.read_text())
        assert raw["family"] == "mixed"
        assert raw["effects"]["RR_red_00"]["lower"] is None
        assert raw["groups"]["1"]["n"] + raw["groups"]["0"]["n"] == 400
        assert "Wrote" in capsys.readouterr().out

    def test_stdout_json_when_no_out(self, csv_path, capsys):
        assert decomp.main(_decompose_args(csv_path, "--K", "10", "--B", "0", "--measure", "rd", "-q")) == 0
        raw = json.loads(capsys.readouterr().out)
        assert set(raw["effects"]) == {"RD_natural", "RD_count_00", "RD_count_01", "RD_count_10",
                                       "RD_red_00", "RD_red_01", "RD_red_10"}

    def test_non_binary_group_is_validation_error(self, tmp_path, capsys):
        path = tmp_path / "bad.csv"
        pd.DataFrame({"Y": [0, 1, 0, 1], "A": [0, 1, 2, 1], "M1": [0.1, 0.2, 0.3, 0.4],
                      "M2": [0, 1, 1, 0], "C": [1, 0, 1, 0]}).to_csv(path, index=False)
        assert decomp.main(_decompose_args(path, "-q")) == 3
        assert "error: validation:" in capsys.readouterr().err

    def test_missing_file_is_configuration_error(self, tmp_path):
        assert decomp.main(_decompose_args(tmp_path / "absent.csv", "-q")) == 2

    def test_bundled_example_matches_golden(self, example_files, tmp_path):
        data_path, golden_path = example_files
        out = tmp_path / "effects.json"
        argv = ["decompose", "--data", str(data_path), *make_example.CLI_ARGS, "--out", str(out), "-q"]
        assert decomp.main(argv) == 0
        golden = json.loads(golden_path.read_text())
        fresh = json.loads(out.read_text())
        assert fresh["effects"] == golden["effects"]
        assert fresh["correlations"] == golden["correlations"]

    def test_malformed_csv_is_validation_error(self, tmp_path, capsys):
        path = tmp_path / "ragged.csv"
        path.write_text("Y,A,M1,M2,C\n0,1,0.5,1,0\n1,0,0.2,0,1\n1,0,0.2,0,1,7,7,7\n")
        assert decomp.main(_decompose_args(path, "-q")) == 3
        err = capsys.readouterr().err
        assert err.startswith("error: validation:")
        assert len(err.strip().splitlines()) == 1

    def test_empty_csv_is_validation_error(self, tmp_path):
        path = tmp_path / "empty.csv"
        path.write_text("")
        assert decomp.main(_decompose_args(path, "-q")) == 3



# ── oracle / simulate / report ──────────────────────────────


class TestOracleCommand:
    def test_inert_mediators_give_zero_reductions(self, capsys):
        argv = ["oracle", "--scenario", "6", "--inert", "--mc-samples", "2000", "--mc-repeats", "2", "-q"]
        assert decomp.main(argv) == 0
        raw = json.loads(capsys.readouterr().out)
        for key in ("00", "01", "10"):
            assert raw["effects"][f"RR_red_{key}"]["estimate"] == pytest.approx(0.0, abs=1e-12)

    def test_csv_output(self, tmp_path):
        out = tmp_path / "truth.csv"
        argv = ["oracle", "--scenario", "1", "--mc-samples", "1000", "--mc-repeats", "2", "--out", str(out), "-q"]
        assert decomp.main(argv) == 0
        assert "RR_natural" in set(pd.read_csv(out)["name"])


class TestSimulateAndReport:
    SMALL = ["--n", "200", "--replicates", "2", "--K", "4", "--B", "4",
             "--mc-samples", "1000", "--mc-repeats", "2", "--seed", "9", "-q"]

    def test_same_seed_byte_identical(self, tmp_path):
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        assert decomp.main(["simulate", "--scenario", "1", *self.SMALL, "--out", str(a)]) == 0
        assert decomp.main(["simulate", "--scenario", "1", *self.SMALL, "--out", str(b)]) == 0
        assert a.read_bytes() == b.read_bytes()
        assert a.with_suffix(".json").exists()

    def test_report_converts_csv_to_json(self, tmp_path, capsys):
        study = tmp_path / "study.csv"
        assert decomp.main(["simulate", "--scenario", "2", *self.SMALL, "--out", str(study)]) == 0
        converted = tmp_path / "converted.json"
        assert decomp.main(["report", "--input", str(study), "--out", str(converted), "--format", "json", "-q"]) == 0
        raw = json.loads(converted.read_text())
        assert [s["scenario"] for s in raw["studies"]] == ["2"]
        assert "Scenario 2" in capsys.readouterr().out

    def test_report_missing_input(self, tmp_path):
        assert decomp.main(["report", "--input", str(tmp_path / "none.csv")]) == 2

    def test_report_malformed_csv(self, tmp_path, capsys):
        path = tmp_path / "study.csv"
        path.write_text("scenario,estimator,effect,metric,value\n1,proposed,RR_red_00,coverage,0.9\n1,a,b,c,d,e,f\n")
        assert decomp.main(["report", "--input", str(path)]) == 3
        assert "error: validation:" in capsys.readouterr().err
