"""Tests for lib/simulation.py — scenario catalogue, data generator, oracle and study harness."""
from __future__ import annotations

import math
from unittest.mock import patch

import numpy as np
import pytest

from lib.data import MediatorKind
from lib.decompose import DecompositionConfig
from lib.errors import DomainError, SeparationError, StudyError, UsageError
from lib.joint import fit_joint
from lib.numerics import RngStream
from lib.simulation import (
    SCENARIOS,
    ScenarioConfig,
    fitted_residual_correlation,
    generate_scenario_data,
    oracle_true_effects,
    residual_correlation,
    run_study,
    scenario_specs,
    summarize_replicates,
    u2_given_a,
)


def _fitted_rho(sid: int, n: int = 100_000, seed: int = 1) -> float:
    cfg = ScenarioConfig.from_id(sid, n=n)
    data = generate_scenario_data(cfg, 0, RngStream(seed))
    return fit_joint(data, scenario_specs(cfg)[1]).correlations()["M1~M2"]


# ── Catalogue ───────────────────────────────────────────────


class TestScenarios:
    def test_eighteen_scenarios(self):
        assert sorted(SCENARIOS) == list(range(1, 19))

    def test_blocks_by_mediator_kind(self):
        assert SCENARIOS[1][0] == (MediatorKind.CONTINUOUS, MediatorKind.CONTINUOUS)
        assert SCENARIOS[7][0] == (MediatorKind.BINARY, MediatorKind.CONTINUOUS)
        assert SCENARIOS[18][0] == (MediatorKind.BINARY, MediatorKind.BINARY)

    def test_scenario_six(self):
        cfg = ScenarioConfig.from_id(6)
        assert cfg.theta == (1.25, 1.25, 0.5)
        assert (cfg.n, cfg.replicates) == (500, 200)

    def test_unknown_scenario(self):
        with pytest.raises(UsageError, match="19"):
            ScenarioConfig.from_id(19)

    def test_with_coefficients_makes_custom(self):
        cfg = ScenarioConfig.from_id(6).with_coefficients(y_m1=0.0)
        assert cfg.label == "custom"
        assert cfg.coefficients.y_m1 == 0.0
        with pytest.raises(DomainError):
            ScenarioConfig.from_id(6).with_coefficients(nonsense=1.0)

    def test_residual_correlation_label(self):
        assert residual_correlation(1.25, 1.25) == pytest.approx(0.6098, abs=1e-4)
        assert residual_correlation(0.7, 0.7) == pytest.approx(0.3289, abs=1e-4)

    def test_u2_given_a(self):
        p1 = 1 / (1 + math.exp(-2.0))
        assert u2_given_a(ScenarioConfig.from_id(1), 1) == pytest.approx(p1 / (p1 + 0.5))


# ── Data generation ─────────────────────────────────────────


class TestGenerateScenarioData:
    def test_columns_and_size(self):
        data = generate_scenario_data(ScenarioConfig.from_id(13, n=300), 0, RngStream(2))
        assert data.n == 300
        assert list(data.frame().columns) == ["Y", "A", "M1", "M2", "C"]
        assert set(np.unique(data.column("M1"))) <= {0.0, 1.0}

    def test_fixed_seed_and_replicate_reproduce(self):
        cfg = ScenarioConfig.from_id(5, n=200)
        a = generate_scenario_data(cfg, 3, RngStream(4)).frame()
        b = generate_scenario_data(cfg, 3, RngStream(4)).frame()
        c = generate_scenario_data(cfg, 4, RngStream(4)).frame()
        assert a.equals(b)
        assert not a.equals(c)

    def test_scenario_one_uncorrelated(self):
        assert abs(_fitted_rho(1)) < 0.03

    def test_scenario_three_correlated(self):
        cfg = ScenarioConfig.from_id(3)
        rho = _fitted_rho(3)
        assert rho == pytest.approx(fitted_residual_correlation(cfg), abs=0.03)
        assert rho == pytest.approx(0.6, abs=0.05)

    def test_group_risks_match_oracle(self):
        cfg = ScenarioConfig.from_id(6, n=200_000)
        data = generate_scenario_data(cfg, 0, RngStream(5))
        truth = oracle_true_effects(cfg, 50_000, 20, RngStream(6))
        for group, key in ((1, "111"), (0, "000")):
            y = data.outcome[data.group == group]
            se = math.sqrt(y.var() / y.size + truth.risk_se[key] ** 2)
            assert abs(y.mean() - truth.risks[key]) <= 3 * se


# ── Oracle ──────────────────────────────────────────────────


class TestOracle:
    def test_scenario_six_ranges(self):
        truth = oracle_true_effects(ScenarioConfig.from_id(6), 20_000, 10, RngStream(7))
        assert 1.25 < truth.natural < 2.50
        assert 1.10 < truth.counterfactual["00"] < 1.25

    def test_reductions_from_reported_slots(self):
        truth = oracle_true_effects(ScenarioConfig.from_id(10), 5000, 4, RngStream(8))
        for key, value in truth.reduction.items():
            assert value == truth.natural - truth.counterfactual[key]

    def test_inert_mediators(self):
        cfg = ScenarioConfig.from_id(6).with_coefficients(y_m1=0.0, y_m2=0.0)
        cfg = ScenarioConfig(id=None, kinds=cfg.kinds, theta=(1.25, 1.25, 0.0), coefficients=cfg.coefficients)
        truth = oracle_true_effects(cfg, 5000, 3, RngStream(9))
        for key, value in truth.counterfactual.items():
            assert value == pytest.approx(truth.natural, abs=1e-12)
            assert truth.reduction[key] == pytest.approx(0.0, abs=1e-12)

    def test_single_repeat_has_larger_se(self):
        cfg = ScenarioConfig.from_id(6)
        one = oracle_true_effects(cfg, 10_000, 1, RngStream(10))
        many = oracle_true_effects(cfg, 10_000, 50, RngStream(10))
        assert np.isfinite(one.se["natural"])
        assert one.se["natural"] > many.se["natural"]
        assert abs(one.natural - many.natural) <= 4 * math.hypot(one.se["natural"], many.se["natural"])

    def test_independent_u1_coincides_without_shared_factor(self):
        cfg = ScenarioConfig.from_id(4)
        shared = oracle_true_effects(cfg, 20_000, 10, RngStream(11))
        split = oracle_true_effects(cfg, 20_000, 10, RngStream(12), shared_u1=False)
        for name, value in shared.estimates().items():
            assert abs(value - split.estimates()[name]) <= 4 * math.hypot(shared.se[name], split.se[name]) + 1e-12

    def test_rejects_zero_samples(self):
        with pytest.raises(DomainError):
            oracle_true_effects(ScenarioConfig.from_id(1), 0, 1)

    @pytest.mark.slow
    def test_doubling_samples_halves_variance(self):
        cfg = ScenarioConfig.from_id(6)
        small = oracle_true_effects(cfg, 2000, 1000, RngStream(13))
        large = oracle_true_effects(cfg, 4000, 1000, RngStream(14))
        ratio = (small.se["natural"] / large.se["natural"]) ** 2
        assert 1.7 <= ratio <= 2.3


# ── Study harness ───────────────────────────────────────────


class TestSummarizeReplicates:
    def test_hand_values(self):
        results = [{"red_00": (1.0, (0.5, 1.5))}, {"red_00": (3.0, (1.5, 3.5))}]
        out = summarize_replicates(results, {"red_00": 2.0}, ["red_00"])["red_00"]
        assert out["percent_bias"] == pytest.approx(0.0)
        assert out["ci_width"] == pytest.approx(1.5)
        assert out["coverage"] == pytest.approx(0.5)

    def test_zero_truth_gives_nan_bias(self):
        out = summarize_replicates([{"red_00": (0.1, None)}], {"red_00": 0.0}, ["red_00"])["red_00"]
        assert math.isnan(out["percent_bias"])
        assert math.isnan(out["coverage"])


class TestRunStudy:
    def _small(self, sid=1, **kw):
        cfg = ScenarioConfig.from_id(sid, n=300, replicates=kw.pop("replicates", 3))
        return run_study(cfg, DecompositionConfig(K=5, B=5, seed=kw.pop("seed", 1)),
                         oracle_samples=5000, oracle_repeats=2, **kw)

    def test_shape(self):
        metrics = self._small()
        assert len(metrics.rows) == 6
        assert {r.estimator for r in metrics.rows} == {"proposed", "existing"}
        assert {r.effect for r in metrics.rows} == {"RR_red_00", "RR_red_01", "RR_red_10"}
        for row in metrics.rows:
            assert 0.0 <= row.coverage <= 1.0
            assert row.ci_width >= 0.0

    def test_deterministic(self):
        a, b = self._small(seed=4), self._small(seed=4)
        assert [r.__dict__ for r in a.rows] == [r.__dict__ for r in b.rows]

    def test_failures_over_limit(self):
        with patch("lib.simulation.decompose", side_effect=SeparationError("separated")):
            with pytest.raises(StudyError, match="replicates failed"):
                self._small()

    def test_truth_scale_must_match(self):
        cfg = ScenarioConfig.from_id(1, n=300, replicates=2)
        truth = oracle_true_effects(ScenarioConfig.from_id(1, measure="rd"), 1000, 2, RngStream(1))
        with pytest.raises(StudyError, match="scale"):
            run_study(cfg, DecompositionConfig(K=2, B=0), truth=truth)


@pytest.mark.slow
class TestScenarioSixReproduction:
    """Desk-scale reproduction: n=500, K=500, B=200, 200 replicates."""

    @pytest.fixture(scope="class")
    def metrics(self):
        cfg = ScenarioConfig.from_id(6)
        return run_study(cfg, DecompositionConfig(K=500, B=200, seed=2024), workers=4)

    def test_existing_joint_effect_biased(self, metrics):
        row = metrics.get("existing", "RR_red_00")
        assert 60 <= row.percent_bias <= 100
        assert row.coverage < 0.65

    def test_proposed_unbiased(self, metrics):
        for effect in ("RR_red_00", "RR_red_01", "RR_red_10"):
            assert abs(metrics.get("proposed", effect).percent_bias) < 5
        assert 0.90 <= metrics.get("proposed", "RR_red_00").coverage <= 0.97
