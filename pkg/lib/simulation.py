"""
Simulation study — scenario generator, Monte Carlo oracle, and the replicate harness.

Generating process (all scenarios):
  C ~ Bern(0.5), U1 ~ N(0, 1), U2 ~ Bern(0.5), logit P(A=1) = 0 + 2 U2, L ~ N(2A, 1)
  LP1 = -1 + 0.5A + 0.5C + theta1 U1
  LP2 = -1 + 0.5A + 0.5C + 0.5L + theta2 U1
  M_j = LP_j + e_j (continuous) or I(LP_j + e_j > 0) (binary), e_j ~ N(0, 1)
  logit P(Y=1) = -2 + 0.5 U2 + 0.5 M1 + 0.5 M2 + theta3 M1 M2 + 0.5 C

U1, U2 and L are discarded; the observed dataset has Y, A, M1, M2, C.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import special

from lib.data import Dataset, MediatorKind, VariableRoles, make_roles
from lib.decompose import (
    ContrastMeasure,
    DecompositionConfig,
    Estimator,
    decompose,
)
from lib.errors import DecompError, DomainError, StudyError, UsageError
from lib.joint import JointMediatorSpec
from lib.numerics import RngLike, RngStream, as_generator
from lib.parallel import run_units
from lib.regression import DesignSpec

log = logging.getLogger("decomp.simulation")

# Stream namespaces under the master seed
STREAM_DATA = 10
STREAM_ORACLE = 11
STREAM_REPLICATE = 12

MAX_REPLICATE_FAILURE = 0.05
ORACLE_SAMPLES = 100_000
ORACLE_REPEATS = 100
ORACLE_BATCHES = 10

# (a, a1, a2): group for U2 and the outcome, group for M1, group for M2
ORACLE_COMBOS = ((1, 1, 1), (0, 0, 0), (1, 0, 0), (1, 0, 1), (1, 1, 0))
STUDY_METRICS = ("percent_bias", "ci_width", "coverage")


# ── Scenarios ────────────────────────────────────────────────

@dataclass(frozen=True)
class GeneratingCoefficients:
    p_c: float = 0.5
    p_u2: float = 0.5
    a_intercept: float = 0.0
    a_u2: float = 2.0
    l_intercept: float = 0.0
    l_a: float = 2.0
    m1_intercept: float = -1.0
    m1_a: float = 0.5
    m1_c: float = 0.5
    m2_intercept: float = -1.0
    m2_a: float = 0.5
    m2_c: float = 0.5
    m2_l: float = 0.5
    y_intercept: float = -2.0
    y_u2: float = 0.5
    y_m1: float = 0.5
    y_m2: float = 0.5
    y_c: float = 0.5


_THETAS = (
    (0.0, 0.0, 0.0), (0.7, 0.7, 0.0), (1.25, 1.25, 0.0),
    (0.0, 0.0, 0.5), (0.7, 0.7, 0.5), (1.25, 1.25, 0.5),
)
_KINDS = (
    (MediatorKind.CONTINUOUS, MediatorKind.CONTINUOUS),
    (MediatorKind.BINARY, MediatorKind.CONTINUOUS),
    (MediatorKind.BINARY, MediatorKind.BINARY),
)
SCENARIOS: Dict[int, Tuple[Tuple[MediatorKind, MediatorKind], Tuple[float, float, float]]] = {
    6 * block + i + 1: (kinds, theta)
    for block, kinds in enumerate(_KINDS)
    for i, theta in enumerate(_THETAS)
}


@dataclass(frozen=True)
class ScenarioConfig:
    id: Optional[int]
    kinds: Tuple[MediatorKind, MediatorKind]
    theta: Tuple[float, float, float]
    n: int = 500
    replicates: int = 200
    measure: ContrastMeasure = ContrastMeasure.RR
    coefficients: GeneratingCoefficients = field(default_factory=GeneratingCoefficients)

    def __post_init__(self):
        object.__setattr__(self, "kinds", tuple(MediatorKind.parse(k) for k in self.kinds))
        object.__setattr__(self, "theta", tuple(float(t) for t in self.theta))
        object.__setattr__(self, "measure", ContrastMeasure.parse(self.measure))
        if len(self.kinds) != 2 or len(self.theta) != 3:
            raise DomainError("Scenarios have two mediators and theta = (theta1, theta2, theta3)")
        if self.n < 2:
            raise DomainError(f"n must be >= 2, got {self.n}")
        if self.replicates < 1:
            raise DomainError(f"replicates must be >= 1, got {self.replicates}")

    @classmethod
    def from_id(cls, scenario_id: int, **kwargs) -> "ScenarioConfig":
        if scenario_id not in SCENARIOS:
            raise UsageError(f"Unknown scenario {scenario_id} (valid: 1-{len(SCENARIOS)})")
        kinds, theta = SCENARIOS[scenario_id]
        return cls(id=scenario_id, kinds=kinds, theta=theta, **kwargs)

    @property
    def label(self) -> str:
        return str(self.id) if self.id is not None else "custom"

    @property
    def roles(self) -> VariableRoles:
        return make_roles("Y", "A", [("M1", self.kinds[0]), ("M2", self.kinds[1])], ["C"])

    def with_coefficients(self, **overrides) -> "ScenarioConfig":
        """Copy with generating coefficients replaced, e.g. y_m1=0, y_m2=0 for inert mediators.

        Changing any coefficient makes the scenario custom (its id no longer matches the catalogue).
        """
        unknown = set(overrides) - {f.name for f in fields(GeneratingCoefficients)}
        if unknown:
            raise DomainError(f"Unknown generating coefficients: {sorted(unknown)}")
        return replace(self, id=None, coefficients=replace(self.coefficients, **overrides))

    def describe(self) -> Dict:
        return {
            "scenario": self.label,
            "kinds": [k.value for k in self.kinds],
            "theta": list(self.theta),
            "n": self.n,
            "replicates": self.replicates,
            "measure": self.measure.value,
            "residual_correlation": residual_correlation(self.theta[0], self.theta[1]),
            "coefficients": asdict(self.coefficients),
        }


def residual_correlation(theta1: float, theta2: float) -> float:
    """Correlation of theta1 U1 + e1 and theta2 U1 + e2 (the catalogue label)."""
    return theta1 * theta2 / math.sqrt((1.0 + theta1 * theta1) * (1.0 + theta2 * theta2))


def fitted_residual_correlation(cfg: ScenarioConfig) -> float:
    """Residual correlation given (A, C), which is what a mediator model without L estimates.

    L's own noise enters M2 with coefficient m2_l, inflating its residual variance.
    """
    t1, t2 = cfg.theta[0], cfg.theta[1]
    b = cfg.coefficients.m2_l
    return t1 * t2 / math.sqrt((1.0 + t1 * t1) * (1.0 + t2 * t2 + b * b))


def scenario_specs(cfg: ScenarioConfig, interaction: bool = True) -> Tuple[DesignSpec, JointMediatorSpec]:
    roles = cfg.roles
    return DesignSpec.outcome(roles, interaction=interaction), JointMediatorSpec.from_roles(roles)


# ── Data generation ──────────────────────────────────────────

def _mediator(kind: MediatorKind, latent: np.ndarray) -> np.ndarray:
    if kind is MediatorKind.BINARY:
        return (latent > 0.0).astype(np.float64)
    return latent


def _outcome_probability(cfg: ScenarioConfig, u2, m1, m2, c) -> np.ndarray:
    k = cfg.coefficients
    theta3 = cfg.theta[2]
    return special.expit(k.y_intercept + k.y_u2 * u2 + k.y_m1 * m1 + k.y_m2 * m2 + theta3 * m1 * m2 + k.y_c * c)


def generate_scenario_data(cfg: ScenarioConfig, replicate: int, rng: RngLike) -> Dataset:
    """One observed dataset. With an RngStream, replicate r draws from `rng.child(r)`."""
    gen = rng.child(replicate).generator() if isinstance(rng, RngStream) else as_generator(rng)
    k = cfg.coefficients
    t1, t2, _ = cfg.theta
    n = cfg.n

    c = (gen.random(n) < k.p_c).astype(np.float64)
    u1 = gen.standard_normal(n)
    u2 = (gen.random(n) < k.p_u2).astype(np.float64)
    a = (gen.random(n) < special.expit(k.a_intercept + k.a_u2 * u2)).astype(np.float64)
    l = k.l_intercept + k.l_a * a + gen.standard_normal(n)
    e = gen.standard_normal((n, 2))

    lp1 = k.m1_intercept + k.m1_a * a + k.m1_c * c + t1 * u1
    lp2 = k.m2_intercept + k.m2_a * a + k.m2_c * c + k.m2_l * l + t2 * u1
    m1 = _mediator(cfg.kinds[0], lp1 + e[:, 0])
    m2 = _mediator(cfg.kinds[1], lp2 + e[:, 1])
    y = (gen.random(n) < _outcome_probability(cfg, u2, m1, m2, c)).astype(np.float64)

    frame = pd.DataFrame({"Y": y, "A": a, "M1": m1, "M2": m2, "C": c})
    return Dataset.from_frame(frame, cfg.roles, source=f"scenario {cfg.label} replicate {replicate}")


# ── Oracle ───────────────────────────────────────────────────

@dataclass
class TrueEffectSet:
    scenario: str
    measure: ContrastMeasure
    natural: float
    counterfactual: Dict[str, float]
    reduction: Dict[str, float]
    se: Dict[str, float]
    risks: Dict[str, float]
    risk_se: Dict[str, float]
    mc_samples: int
    mc_repeats: int
    shared_u1: bool = True

    def estimates(self) -> Dict[str, float]:
        out = {"natural": self.natural}
        out.update({f"count_{k}": v for k, v in self.counterfactual.items()})
        out.update({f"red_{k}": v for k, v in self.reduction.items()})
        return out

    def label(self, name: str) -> str:
        return f"{self.measure.prefix}_{name}"

    def to_dict(self) -> Dict:
        return {
            "scenario": self.scenario,
            "measure": self.measure.value,
            "mc_samples": self.mc_samples,
            "mc_repeats": self.mc_repeats,
            "shared_u1": self.shared_u1,
            "effects": {
                self.label(name): {"estimate": value, "se": self.se[name]}
                for name, value in self.estimates().items()
            },
            "risks": {key: {"estimate": v, "se": self.risk_se[key]} for key, v in self.risks.items()},
        }

    @classmethod
    def from_dict(cls, raw: Dict) -> "TrueEffectSet":
        measure = ContrastMeasure.parse(raw["measure"])
        prefix = measure.prefix + "_"
        effects = {label[len(prefix):]: v for label, v in raw["effects"].items()}
        return cls(
            scenario=str(raw["scenario"]),
            measure=measure,
            natural=effects["natural"]["estimate"],
            counterfactual={k[len("count_"):]: v["estimate"] for k, v in effects.items() if k.startswith("count_")},
            reduction={k[len("red_"):]: v["estimate"] for k, v in effects.items() if k.startswith("red_")},
            se={k: v["se"] for k, v in effects.items()},
            risks={k: v["estimate"] for k, v in raw["risks"].items()},
            risk_se={k: v["se"] for k, v in raw["risks"].items()},
            mc_samples=raw["mc_samples"],
            mc_repeats=raw["mc_repeats"],
            shared_u1=raw.get("shared_u1", True),
        )


def u2_given_a(cfg: ScenarioConfig, a: int) -> float:
    """P(U2 = 1 | A = a) by Bayes' rule."""
    k = cfg.coefficients
    pa1 = special.expit(k.a_intercept + k.a_u2)
    pa0 = special.expit(k.a_intercept)
    like1 = pa1 if a == 1 else 1.0 - pa1
    like0 = pa0 if a == 1 else 1.0 - pa0
    return float(like1 * k.p_u2 / (like1 * k.p_u2 + like0 * (1.0 - k.p_u2)))


def _combo_risks(cfg: ScenarioConfig, gen: np.random.Generator, samples: int, shared_u1: bool) -> Dict[str, np.ndarray]:
    """Per-sample E(Y | m1, m2, c, u2) for every (a, a1, a2) combination.

    One set of base draws is shared by all combinations.
    """
    k = cfg.coefficients
    t1, t2, _ = cfg.theta
    c = (gen.random(samples) < k.p_c).astype(np.float64)
    u1 = gen.standard_normal(samples)
    u1_m2 = u1 if shared_u1 else gen.standard_normal(samples)
    v2 = gen.random(samples)
    zl = gen.standard_normal(samples)
    e = gen.standard_normal((samples, 2))

    out = {}
    for a, a1, a2 in ORACLE_COMBOS:
        u2 = (v2 < u2_given_a(cfg, a)).astype(np.float64)
        l = k.l_intercept + k.l_a * a2 + zl
        m1 = _mediator(cfg.kinds[0], k.m1_intercept + k.m1_a * a1 + k.m1_c * c + t1 * u1 + e[:, 0])
        m2 = _mediator(cfg.kinds[1], k.m2_intercept + k.m2_a * a2 + k.m2_c * c + k.m2_l * l + t2 * u1_m2 + e[:, 1])
        out[f"{a}{a1}{a2}"] = _outcome_probability(cfg, u2, m1, m2, c)
    return out


def _truth_from_risks(risks: Dict[str, float], measure: ContrastMeasure) -> Dict[str, float]:
    den = risks["000"]
    if measure is ContrastMeasure.RR:
        f = lambda num: num / den  # noqa: E731
    else:
        f = lambda num: num - den  # noqa: E731
    natural = f(risks["111"])
    counts = {"00": f(risks["100"]), "01": f(risks["101"]), "10": f(risks["110"])}
    out = {"natural": natural}
    out.update({f"count_{key}": v for key, v in counts.items()})
    out.update({f"red_{key}": natural - v for key, v in counts.items()})
    return out


def oracle_true_effects(
    cfg: ScenarioConfig,
    mc_samples: int = ORACLE_SAMPLES,
    mc_repeats: int = ORACLE_REPEATS,
    rng: Optional[RngLike] = None,
    shared_u1: bool = True,
) -> TrueEffectSet:
    """True effects by Monte Carlo integration with exact outcome probabilities.

    Each repeat draws `mc_samples` points; the reported value is the mean of the
    per-repeat effects and the SE their standard deviation over sqrt(mc_repeats).
    A single repeat is split into batches to estimate its SE. `shared_u1=False`
    gives each mediator its own copy of U1 (the independence-assuming truth).
    """
    if mc_samples < 1 or mc_repeats < 1:
        raise DomainError("mc_samples and mc_repeats must be >= 1")
    rng = rng if rng is not None else RngStream(0).child(STREAM_ORACLE)
    measure = cfg.measure

    risk_rows: List[Dict[str, float]] = []
    for r in range(mc_repeats):
        gen = rng.child(r).generator() if isinstance(rng, RngStream) else as_generator(rng)
        draws = _combo_risks(cfg, gen, mc_samples, shared_u1)
        if mc_repeats == 1:
            for chunk in np.array_split(np.arange(mc_samples), min(ORACLE_BATCHES, mc_samples)):
                risk_rows.append({key: float(v[chunk].mean()) for key, v in draws.items()})
        else:
            risk_rows.append({key: float(v.mean()) for key, v in draws.items()})
    per_repeat = [_truth_from_risks(row, measure) for row in risk_rows]

    def summarize(rows: List[Dict[str, float]]) -> Tuple[Dict[str, float], Dict[str, float]]:
        keys = rows[0].keys()
        mean = {key: float(np.mean([row[key] for row in rows])) for key in keys}
        if len(rows) < 2:
            return mean, {key: float("nan") for key in keys}
        se = {key: float(np.std([row[key] for row in rows], ddof=1) / math.sqrt(len(rows))) for key in keys}
        return mean, se

    if mc_repeats == 1:
        risks = {key: float(v.mean()) for key, v in draws.items()}
        values = _truth_from_risks(risks, measure)
        _, se = summarize(per_repeat)
        _, risk_se = summarize(risk_rows)
    else:
        values, se = summarize(per_repeat)
        risks, risk_se = summarize(risk_rows)
    # reductions from the reported slots so natural - count holds exactly
    for key in ("00", "01", "10"):
        values[f"red_{key}"] = values["natural"] - values[f"count_{key}"]

    truth = TrueEffectSet(
        scenario=cfg.label,
        measure=measure,
        natural=values["natural"],
        counterfactual={key: values[f"count_{key}"] for key in ("00", "01", "10")},
        reduction={key: values[f"red_{key}"] for key in ("00", "01", "10")},
        se=se,
        risks=risks,
        risk_se=risk_se,
        mc_samples=mc_samples,
        mc_repeats=mc_repeats,
        shared_u1=shared_u1,
    )
    log.info(f"Oracle scenario {cfg.label}: {truth.label('natural')} = {truth.natural:.4f} (SE {se['natural']:.2g})")
    return truth


# ── Study harness ────────────────────────────────────────────

@dataclass
class MetricRow:
    estimator: str
    effect: str
    percent_bias: float
    ci_width: float
    coverage: float
    mean_estimate: float = float("nan")
    truth: float = float("nan")

    def metric(self, name: str) -> float:
        return getattr(self, name)


@dataclass
class StudyMetrics:
    scenario: str
    measure: ContrastMeasure
    rows: List[MetricRow]
    replicates: int = 0
    failures: int = 0
    seed: int = 0
    truth: Optional[TrueEffectSet] = None
    config: Dict = field(default_factory=dict)

    def get(self, estimator: str, effect: str) -> MetricRow:
        for row in self.rows:
            if row.estimator == estimator and row.effect == effect:
                return row
        raise KeyError(f"No metrics for {estimator}/{effect}")


def _replicate_unit(args) -> Dict:
    """Generate one dataset and run every estimator on it. Module level for pickling."""
    cfg, dconfig, estimators, data_stream, decomp_stream, replicate = args
    outcome_spec, mediator_spec = scenario_specs(cfg)
    try:
        data = generate_scenario_data(cfg, replicate, data_stream)
        out = {}
        for est in estimators:
            effects = decompose(data, outcome_spec, mediator_spec, replace(dconfig, estimator=est), decomp_stream)
            out[est.value] = {
                name: (value, effects.interval(name)) for name, value in effects.estimates().items()
            }
    except DecompError as e:
        return {"replicate": replicate, "error": f"{e.kind}: {e.message}"}
    return {"replicate": replicate, "results": out}


def summarize_replicates(
    results: Sequence[Dict[str, Tuple[float, Optional[Tuple[float, float]]]]],
    truth: Dict[str, float],
    effects: Sequence[str],
) -> Dict[str, Dict[str, float]]:
    """percent bias, mean CI width and coverage per effect over replicate results."""
    out = {}
    for name in effects:
        est = np.array([r[name][0] for r in results], dtype=np.float64)
        target = truth[name]
        bias = 100.0 * (est.mean() - target) / abs(target) if target != 0 else float("nan")
        cis = [r[name][1] for r in results if r[name][1] is not None]
        if cis:
            lo = np.array([ci[0] for ci in cis])
            hi = np.array([ci[1] for ci in cis])
            width = float(np.mean(hi - lo))
            coverage = float(np.mean((lo <= target) & (target <= hi)))
        else:
            width = coverage = float("nan")
        out[name] = {"percent_bias": float(bias), "ci_width": width, "coverage": coverage, "mean_estimate": float(est.mean())}
    return out


def run_study(
    cfg: ScenarioConfig,
    dconfig: DecompositionConfig,
    estimators: Sequence[Estimator] = (Estimator.PROPOSED, Estimator.EXISTING),
    truth: Optional[TrueEffectSet] = None,
    workers: Optional[int] = None,
    oracle_samples: int = ORACLE_SAMPLES,
    oracle_repeats: int = ORACLE_REPEATS,
) -> StudyMetrics:
    """Replicated comparison of estimators against the oracle truth.

    Replicate r of scenario s draws data from (seed, DATA, s, r) and runs every
    estimator with the same decomposition stream (seed, REPLICATE, s, r), so the
    estimators are paired. Effects scored are the reductions.
    """
    estimators = [Estimator.parse(e) for e in estimators]
    dconfig = replace(dconfig, measure=cfg.measure, workers=1)
    master = RngStream(dconfig.seed)
    sid = cfg.id if cfg.id is not None else 0
    if truth is None:
        truth = oracle_true_effects(cfg, oracle_samples, oracle_repeats, master.child(STREAM_ORACLE, sid))
    if truth.measure is not cfg.measure:
        raise StudyError(f"Truth is on the {truth.measure.prefix} scale, study on {cfg.measure.prefix}")

    units = [
        (cfg, dconfig, estimators, master.child(STREAM_DATA, sid), master.child(STREAM_REPLICATE, sid, r), r)
        for r in range(cfg.replicates)
    ]
    log.info(f"Scenario {cfg.label}: {cfg.replicates} replicates x {len(estimators)} estimators (n={cfg.n})")
    results = run_units(_replicate_unit, units, workers=workers or 1, label=f"scenario {cfg.label} replicates")

    ok = [r for r in results if "error" not in r]
    failures = len(results) - len(ok)
    for r in results:
        if "error" in r:
            log.warning(f"Scenario {cfg.label} replicate {r['replicate']} failed: {r['error']}")
    if failures > MAX_REPLICATE_FAILURE * cfg.replicates or not ok:
        raise StudyError(
            f"Scenario {cfg.label}: {failures} of {cfg.replicates} replicates failed (limit {MAX_REPLICATE_FAILURE:.0%})"
        )

    truth_values = truth.estimates()
    effects = [name for name in truth_values if name.startswith("red_")]
    rows = []
    for est in estimators:
        summary = summarize_replicates([r["results"][est.value] for r in ok], truth_values, effects)
        for name in effects:
            s = summary[name]
            rows.append(MetricRow(
                estimator=est.value, effect=truth.label(name),
                percent_bias=s["percent_bias"], ci_width=s["ci_width"], coverage=s["coverage"],
                mean_estimate=s["mean_estimate"], truth=truth_values[name],
            ))
    metrics = StudyMetrics(
        scenario=cfg.label, measure=cfg.measure, rows=rows, replicates=cfg.replicates,
        failures=failures, seed=dconfig.seed, truth=truth,
        config={**cfg.describe(), "K": dconfig.K, "B": dconfig.B},
    )
    for row in rows:
        log.info(
            f"Scenario {cfg.label} {row.estimator:8s} {row.effect}: bias {row.percent_bias:+.1f}% "
            f"width {row.ci_width:.3f} coverage {row.coverage:.3f}"
        )
    return metrics
