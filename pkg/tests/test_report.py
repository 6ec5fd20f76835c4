"""Tests for lib/report.py — effect, truth and study-metric files."""
from __future__ import annotations

import json

import pandas as pd
import pytest

from lib.decompose import ContrastMeasure, EffectSet, Estimator
from lib.errors import ConfigurationError, ValidationError
from lib.numerics import RngStream
from lib.report import (
    STUDY_COLUMNS,
    emit_report,
    format_effects,
    format_study,
    load_effects,
    load_report,
    study_frame,
    write_effects,
    write_truth,
)
from lib.simulation import MetricRow, ScenarioConfig, StudyMetrics, oracle_true_effects


def _effects(intervals: bool = True) -> EffectSet:
    names = ["natural", "count_00", "count_01", "count_10", "red_00", "red_01", "red_10"]
    return EffectSet(
        measure=ContrastMeasure.RR,
        estimator=Estimator.PROPOSED,
        mediators=["M1", "M2"],
        natural=1.6180339887498949,
        counterfactual={"00": 1.1, "01": 1.3, "10": 1.2},
        reduction={"00": 1.6180339887498949 - 1.1, "01": 1.6180339887498949 - 1.3, "10": 1.6180339887498949 - 1.2},
        intervals={n: (0.1 / 3, 2.0 / 3) for n in names} if intervals else None,
        K=500, B=200 if intervals else 0, seed=2 ** 63 + 1, n=500, family="continuous",
        correlations={"M1~M2": 0.5123456789012345},
    )


def _metrics(scenario: str = "6") -> StudyMetrics:
    rows = [
        MetricRow(estimator=est, effect=f"RR_red_{k}", percent_bias=bias, ci_width=0.2 / 3, coverage=0.935)
        for est, bias in (("proposed", 1.2), ("existing", 80.1))
        for k in ("00", "01", "10")
    ]
    return StudyMetrics(scenario=scenario, measure=ContrastMeasure.RR, rows=rows, replicates=200, failures=1, seed=7)


# ── EffectSet files ─────────────────────────────────────────


class TestEffectsFiles:
    def test_json_carries_extra_diagnostics(self, tmp_path):
        path = write_effects(_effects(), tmp_path / "e.json", extra={"groups": {"0": {"n": 250}}})
        raw = json.loads(path.read_text())
        assert raw["groups"]["0"]["n"] == 250
        assert raw["effects"]["RR_natural"]["estimate"] == 1.6180339887498949

    def test_csv_and_json_hold_identical_values(self, tmp_path):
        effects = _effects()
        from_json = load_effects(write_effects(effects, tmp_path / "e.json"))
        from_csv = load_effects(write_effects(effects, tmp_path / "e.csv"))
        assert from_json.estimates() == from_csv.estimates() == effects.estimates()
        assert from_json.intervals == from_csv.intervals
        assert from_csv.seed == effects.seed
        assert from_csv.correlations == effects.correlations

    def test_null_intervals_survive_csv(self, tmp_path):
        again = load_effects(write_effects(_effects(intervals=False), tmp_path / "e.csv"))
        assert again.intervals is None

    def test_unknown_format(self, tmp_path):
        with pytest.raises(ConfigurationError):
            write_effects(_effects(), tmp_path / "e.xml")

    def test_human_summary(self):
        text = format_effects(_effects())
        assert "RR_red_00" in text
        assert "rho M1~M2" in text


# ── Oracle truth files ──────────────────────────────────────


class TestTruthFiles:
    def test_csv_rows(self, tmp_path):
        truth = oracle_true_effects(ScenarioConfig.from_id(6), 2000, 2, RngStream(1))
        df = pd.read_csv(write_truth(truth, tmp_path / "t.csv"))
        assert "RR_natural" in set(df["name"])
        assert "risk_111" in set(df["name"])


# ── Study reports ───────────────────────────────────────────


class TestEmitReport:
    def test_empty_metrics_header_only(self, tmp_path):
        path = emit_report([], tmp_path / "r.csv")
        assert path.read_text().strip() == ",".join(STUDY_COLUMNS)

    def test_scenario_six_shape(self):
        df = study_frame([_metrics()])
        assert len(df) == 3 * 2 * 3
        assert list(df.columns) == STUDY_COLUMNS

    def test_csv_round_trip(self, tmp_path):
        metrics = [_metrics("1"), _metrics("6")]
        again = load_report(emit_report(metrics, tmp_path / "r.csv"))
        assert [m.scenario for m in again] == ["1", "6"]
        for a, b in zip(metrics, again):
            for ra, rb in zip(a.rows, b.rows):
                assert (ra.estimator, ra.effect, ra.percent_bias, ra.ci_width, ra.coverage) == (
                    rb.estimator, rb.effect, rb.percent_bias, rb.ci_width, rb.coverage)

    def test_json_round_trip_keeps_counts(self, tmp_path):
        again = load_report(emit_report([_metrics()], tmp_path / "r.json"))[0]
        assert (again.replicates, again.failures, again.seed) == (200, 1, 7)
        assert [(r.effect, r.percent_bias, r.coverage) for r in again.rows] == [
            (r.effect, r.percent_bias, r.coverage) for r in _metrics().rows]

    def test_missing_columns(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("scenario,value\n1,2\n")
        with pytest.raises(ValidationError, match="missing report columns"):
            load_report(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigurationError):
            load_report(tmp_path / "absent.json")

    def test_human_summary(self):
        assert "Scenario 6 (200 replicates, 1 failed)" in format_study([_metrics()])
