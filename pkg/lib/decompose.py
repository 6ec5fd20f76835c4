"""
Decomposition engine — natural-course and counterfactual pseudopopulations.

Per Monte Carlo repetition k, one n x K block of standard-normal mediator errors
and one block of outcome uniforms are drawn and shared by every intervention
(common random numbers). Each contrast's numerator is the mean outcome among
A=1 under the intervention; every denominator is the mean outcome among A=0
with all mediators assigned group 0.

Effects:
  natural        contrast with mediators at each individual's observed group
  count_<xy>     contrast with mediator j drawn as if A = x_j (all-ones excluded)
  red_<xy>       natural - count_<xy>
"""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from lib.data import Dataset
from lib.errors import (
    DegenerateContrastError,
    DesignError,
    DomainError,
    ModelFitError,
    ValidationError,
)
from lib.joint import (
    NATURAL,
    Assignment,
    JointMediatorFit,
    JointMediatorSpec,
    fit_independent,
    fit_joint,
    independent_from_marginals,
    mediator_draws,
)
from lib.numerics import RngLike, RngStream, as_generator
from lib.parallel import run_units
from lib.regression import DesignSpec, OutcomeFit, Rows, UnivariateMediatorFit, columns_of, fit_logistic, predict_response

log = logging.getLogger("decomp.decompose")

STREAM_POINT = 0
STREAM_BOOTSTRAP = 1
CI_LEVELS = (0.025, 0.975)
MAX_BOOTSTRAP_FAILURE = 0.10


# ── Types ────────────────────────────────────────────────────

class ContrastMeasure(str, Enum):
    RR = "rr"
    RD = "rd"

    @classmethod
    def parse(cls, raw: Union[str, "ContrastMeasure"]) -> "ContrastMeasure":
        if isinstance(raw, ContrastMeasure):
            return raw
        key = raw.strip().lower()
        if key in ("rr", "relative-risk", "relativerisk"):
            return cls.RR
        if key in ("rd", "risk-difference", "riskdifference"):
            return cls.RD
        raise DomainError(f"Unknown contrast measure '{raw}' (use rr or rd)")

    @property
    def prefix(self) -> str:
        return self.value.upper()


class Estimator(str, Enum):
    PROPOSED = "proposed"
    EXISTING = "existing"

    @classmethod
    def parse(cls, raw: Union[str, "Estimator"]) -> "Estimator":
        if isinstance(raw, Estimator):
            return raw
        try:
            return cls(raw.strip().lower())
        except ValueError:
            raise DomainError(f"Unknown estimator '{raw}' (use proposed or existing)")


@dataclass(frozen=True)
class Intervention:
    assignment: Tuple[Assignment, ...]

    def __post_init__(self):
        assignment = tuple(self.assignment)
        for a in assignment:
            if a != NATURAL and a not in (0, 1):
                raise ValidationError(f"Intervention entries must be 0, 1 or '{NATURAL}', got {a!r}")
        object.__setattr__(self, "assignment", tuple(a if a == NATURAL else int(a) for a in assignment))

    @classmethod
    def natural(cls, k: int) -> "Intervention":
        return cls((NATURAL,) * k)

    @property
    def is_natural(self) -> bool:
        return all(a == NATURAL for a in self.assignment)

    @property
    def key(self) -> str:
        if self.is_natural:
            return "natural"
        return "count_" + "".join("n" if a == NATURAL else str(a) for a in self.assignment)


def intervention_lattice(k: int) -> List[Intervention]:
    """Natural course, then every assignment in {0,1}^k except all ones, in binary order."""
    out = [Intervention.natural(k)]
    out += [Intervention(a) for a in itertools.product((0, 1), repeat=k) if not all(a)]
    return out


@dataclass(frozen=True)
class DecompositionConfig:
    K: int = 500
    B: int = 200
    measure: ContrastMeasure = ContrastMeasure.RR
    estimator: Estimator = Estimator.PROPOSED
    seed: int = 0
    workers: int = 1
    average_probabilities: bool = False
    rho_interval: bool = False

    def __post_init__(self):
        object.__setattr__(self, "measure", ContrastMeasure.parse(self.measure))
        object.__setattr__(self, "estimator", Estimator.parse(self.estimator))
        if self.K < 1:
            raise DomainError(f"K must be >= 1, got {self.K}")
        if self.B < 0:
            raise DomainError(f"B must be >= 0, got {self.B}")
        if self.workers < 1:
            raise DomainError(f"workers must be >= 1, got {self.workers}")
        if not 0 <= self.seed < 2 ** 64:
            raise DomainError(f"seed must be a 64-bit unsigned integer, got {self.seed}")


@dataclass
class EffectSet:
    measure: ContrastMeasure
    estimator: Estimator
    mediators: List[str]
    natural: float
    counterfactual: Dict[str, float]
    reduction: Dict[str, float]
    intervals: Optional[Dict[str, Tuple[float, float]]] = None
    K: int = 0
    B: int = 0
    seed: int = 0
    n: int = 0
    family: str = ""
    correlations: Dict[str, float] = field(default_factory=dict)
    correlation_intervals: Optional[Dict[str, Tuple[float, float]]] = None
    bootstrap_failures: int = 0
    average_probabilities: bool = False

    def estimates(self) -> Dict[str, float]:
        """Every quantity in report order: natural, count_*, red_*."""
        out = {"natural": self.natural}
        out.update({f"count_{k}": v for k, v in self.counterfactual.items()})
        out.update({f"red_{k}": v for k, v in self.reduction.items()})
        return out

    def label(self, name: str) -> str:
        return f"{self.measure.prefix}_{name}"

    def interval(self, name: str) -> Optional[Tuple[float, float]]:
        if self.intervals is None:
            return None
        return self.intervals[name]

    def to_dict(self) -> Dict:
        return {
            "measure": self.measure.value,
            "estimator": self.estimator.value,
            "mediators": list(self.mediators),
            "family": self.family,
            "n": self.n,
            "K": self.K,
            "B": self.B,
            "seed": self.seed,
            "average_probabilities": self.average_probabilities,
            "bootstrap_failures": self.bootstrap_failures,
            "effects": {
                self.label(name): {
                    "estimate": value,
                    "lower": None if self.intervals is None else self.intervals[name][0],
                    "upper": None if self.intervals is None else self.intervals[name][1],
                }
                for name, value in self.estimates().items()
            },
            "correlations": {
                pair: {
                    "estimate": rho,
                    "lower": None if not self.correlation_intervals else self.correlation_intervals[pair][0],
                    "upper": None if not self.correlation_intervals else self.correlation_intervals[pair][1],
                }
                for pair, rho in self.correlations.items()
            },
        }

    @classmethod
    def from_dict(cls, raw: Dict) -> "EffectSet":
        measure = ContrastMeasure.parse(raw["measure"])
        prefix = measure.prefix + "_"
        effects = {label[len(prefix):]: v for label, v in raw["effects"].items()}
        has_ci = any(v["lower"] is not None for v in effects.values())
        corr = raw.get("correlations", {})
        has_corr_ci = any(v["lower"] is not None for v in corr.values())
        return cls(
            measure=measure,
            estimator=Estimator.parse(raw["estimator"]),
            mediators=list(raw["mediators"]),
            natural=effects["natural"]["estimate"],
            counterfactual={k[len("count_"):]: v["estimate"] for k, v in effects.items() if k.startswith("count_")},
            reduction={k[len("red_"):]: v["estimate"] for k, v in effects.items() if k.startswith("red_")},
            intervals={k: (v["lower"], v["upper"]) for k, v in effects.items()} if has_ci else None,
            K=raw["K"], B=raw["B"], seed=raw["seed"], n=raw.get("n", 0), family=raw.get("family", ""),
            correlations={k: v["estimate"] for k, v in corr.items()},
            correlation_intervals={k: (v["lower"], v["upper"]) for k, v in corr.items()} if has_corr_ci else None,
            bootstrap_failures=raw.get("bootstrap_failures", 0),
            average_probabilities=raw.get("average_probabilities", False),
        )


# ── Pseudopopulations ────────────────────────────────────────

def _as_joint(mediators: Union[JointMediatorFit, Sequence[UnivariateMediatorFit]], group: str) -> JointMediatorFit:
    if isinstance(mediators, JointMediatorFit):
        return mediators
    marginals = list(mediators)
    spec = JointMediatorSpec(
        mediators=tuple((m.name, m.kind) for m in marginals),
        group=group,
        designs=tuple(m.spec for m in marginals),
    )
    return independent_from_marginals(spec, marginals)


def _repetition(
    outcome: OutcomeFit,
    med_fit: JointMediatorFit,
    rows: Rows,
    n: int,
    interventions: Sequence[Intervention],
    gen: np.random.Generator,
    average: bool,
) -> Dict[str, np.ndarray]:
    """Outcome draws (or probabilities) for one repetition under every intervention."""
    z = gen.standard_normal((n, med_fit.spec.k))
    u = gen.random(n)
    names = med_fit.spec.names
    out = {}
    for iv in interventions:
        M = mediator_draws(med_fit, rows, iv.assignment, z)
        p = predict_response(outcome, rows, {name: M[:, j] for j, name in enumerate(names)})
        out[iv.key] = p if average else (u < p).astype(np.float64)
    return out


def _repetition_generator(rng: RngLike, k: int) -> np.random.Generator:
    if isinstance(rng, RngStream):
        return rng.child(k).generator()
    return as_generator(rng)


def pseudopopulation_outcomes(
    outcome: OutcomeFit,
    mediators: Union[JointMediatorFit, Sequence[UnivariateMediatorFit]],
    data: Dataset,
    iv: Intervention,
    K: int,
    rng: RngLike,
    average_probabilities: bool = False,
) -> np.ndarray:
    """K x n outcome draws under `iv`. Repetition k uses stream `rng.child(k)`."""
    if K < 1:
        raise DomainError(f"K must be >= 1, got {K}")
    med_fit = _as_joint(mediators, data.roles.group)
    if len(iv.assignment) != med_fit.spec.k:
        raise ValidationError(f"Intervention has {len(iv.assignment)} entries for {med_fit.spec.k} mediators")
    _check_columns(outcome, med_fit, data)
    out = np.empty((K, data.n))
    for k in range(K):
        draws = _repetition(outcome, med_fit, data, data.n, [iv], _repetition_generator(rng, k), average_probabilities)
        out[k] = draws[iv.key]
    return out


def _check_columns(outcome: OutcomeFit, med_fit: JointMediatorFit, data: Dataset) -> None:
    cols = columns_of(data)
    needed = set(outcome.spec.columns) - set(med_fit.spec.names)
    for d in med_fit.spec.designs:
        needed |= set(d.columns)
    missing = sorted(c for c in needed if c not in cols)
    if missing:
        raise ValidationError(f"Dataset lacks columns used by the fitted models: {missing}")


# ── Contrasts ────────────────────────────────────────────────

def _contrast_from_means(num: np.ndarray, den: np.ndarray, measure: ContrastMeasure) -> float:
    if measure is ContrastMeasure.RR:
        zero = np.flatnonzero(den <= 0.0)
        if zero.size:
            raise DegenerateContrastError(
                f"repetition {int(zero[0])}: group-0 risk is zero, relative risk undefined"
                + (f" ({zero.size} repetitions affected)" if zero.size > 1 else "")
            )
        return float(np.mean(num / den))
    return float(np.mean(num - den))


def contrast(
    draws: np.ndarray,
    groups: np.ndarray,
    measure: ContrastMeasure,
    denominator_draws: np.ndarray,
) -> float:
    """Mean over repetitions of (A=1 mean of `draws`) vs (A=0 mean of `denominator_draws`)."""
    draws = np.atleast_2d(np.asarray(draws, dtype=np.float64))
    den_draws = np.atleast_2d(np.asarray(denominator_draws, dtype=np.float64))
    groups = np.asarray(groups)
    if draws.shape != den_draws.shape or draws.shape[1] != groups.size:
        raise ValidationError(
            f"Draw shapes {draws.shape} and {den_draws.shape} do not match {groups.size} individuals"
        )
    g1, g0 = groups == 1, groups == 0
    if not g1.any() or not g0.any():
        raise ValidationError("Both groups need at least one individual")
    return _contrast_from_means(draws[:, g1].mean(axis=1), den_draws[:, g0].mean(axis=1), ContrastMeasure.parse(measure))


# ── Point estimates ──────────────────────────────────────────

@dataclass
class _Point:
    natural: float
    counterfactual: Dict[str, float]
    med_fit: JointMediatorFit

    def reductions(self) -> Dict[str, float]:
        return {k: self.natural - v for k, v in self.counterfactual.items()}

    def flat(self) -> Dict[str, float]:
        out = {"natural": self.natural}
        out.update({f"count_{k}": v for k, v in self.counterfactual.items()})
        out.update({f"red_{k}": v for k, v in self.reductions().items()})
        return out


def _fit_mediators(data: Dataset, spec: JointMediatorSpec, estimator: Estimator) -> JointMediatorFit:
    if estimator is Estimator.EXISTING:
        return fit_independent(data, spec)
    return fit_joint(data, spec)


def _point_estimates(
    data: Dataset,
    outcome_spec: DesignSpec,
    mediator_spec: JointMediatorSpec,
    config: DecompositionConfig,
    stream: RngStream,
) -> _Point:
    outcome = fit_logistic(data, outcome_spec)
    med_fit = _fit_mediators(data, mediator_spec, config.estimator)
    _check_columns(outcome, med_fit, data)

    ivs = intervention_lattice(mediator_spec.k)
    denominator = "count_" + "0" * mediator_spec.k
    g1, g0 = data.group == 1, data.group == 0
    num = {iv.key: np.empty(config.K) for iv in ivs}
    den = np.empty(config.K)
    for k in range(config.K):
        draws = _repetition(outcome, med_fit, data, data.n, ivs, stream.child(k).generator(),
                            config.average_probabilities)
        den[k] = draws[denominator][g0].mean()
        for key, values in draws.items():
            num[key][k] = values[g1].mean()

    natural = _contrast_from_means(num["natural"], den, config.measure)
    counterfactual = {
        key[len("count_"):]: _contrast_from_means(num[key], den, config.measure)
        for key in num if key != "natural"
    }
    return _Point(natural=natural, counterfactual=counterfactual, med_fit=med_fit)


# ── Bootstrap ────────────────────────────────────────────────

def stratified_resample(data: Dataset, gen: np.random.Generator) -> Dataset:
    """Resample individuals with replacement within each group, keeping group sizes."""
    a = data.group
    idx = np.concatenate([
        gen.choice(np.flatnonzero(a == g), size=int(np.count_nonzero(a == g)), replace=True)
        for g in (0, 1)
    ])
    return data.take(idx)


def _bootstrap_unit(args) -> Dict:
    """One resample: refit both models and recompute every quantity. Module level for pickling."""
    data, outcome_spec, mediator_spec, config, stream = args
    try:
        sample = stratified_resample(data, stream.child(0).generator())
        point = _point_estimates(sample, outcome_spec, mediator_spec, config, stream.child(1))
    except (ModelFitError, DesignError, DegenerateContrastError) as e:
        return {"error": f"{e.kind}: {e.message}"}
    return {"estimates": point.flat(), "correlations": point.med_fit.correlations()}


def percentile_interval(values: Sequence[float]) -> Tuple[float, float]:
    """Linear-interpolation empirical quantiles at 2.5% and 97.5%."""
    lo, hi = np.quantile(np.asarray(values, dtype=np.float64), CI_LEVELS, method="linear")
    return float(lo), float(hi)


def _bootstrap(
    data: Dataset,
    outcome_spec: DesignSpec,
    mediator_spec: JointMediatorSpec,
    config: DecompositionConfig,
    stream: RngStream,
) -> Tuple[Dict[str, Tuple[float, float]], Dict[str, Tuple[float, float]], int]:
    units = [(data, outcome_spec, mediator_spec, config, stream.child(STREAM_BOOTSTRAP, b)) for b in range(config.B)]
    results = run_units(_bootstrap_unit, units, workers=config.workers, label="bootstrap")

    ok = [r for r in results if "error" not in r]
    failures = config.B - len(ok)
    for b, r in enumerate(results):
        if "error" in r:
            log.warning(f"Bootstrap resample {b} dropped: {r['error']}")
    if failures > MAX_BOOTSTRAP_FAILURE * config.B or not ok:
        raise ModelFitError(f"{failures} of {config.B} bootstrap resamples failed (limit {MAX_BOOTSTRAP_FAILURE:.0%})")
    if failures:
        log.warning(f"{failures} of {config.B} bootstrap resamples dropped")

    intervals = {name: percentile_interval([r["estimates"][name] for r in ok]) for name in ok[0]["estimates"]}
    corr_intervals = {pair: percentile_interval([r["correlations"][pair] for r in ok]) for pair in ok[0]["correlations"]}
    return intervals, corr_intervals, failures


# ── Public API ───────────────────────────────────────────────

def decompose(
    data: Dataset,
    outcome_spec: DesignSpec,
    mediator_spec: JointMediatorSpec,
    config: DecompositionConfig,
    stream: Optional[RngStream] = None,
) -> EffectSet:
    """Fit, simulate, contrast and (B > 0) bootstrap with the configured estimator.

    `stream` overrides the stream derived from `config.seed` (the study harness
    passes per-replicate streams).
    """
    stream = stream or RngStream(config.seed)
    log.info(
        f"Decomposing n={data.n} with the {config.estimator.value} estimator "
        f"({config.measure.prefix}, K={config.K}, B={config.B})"
    )
    point = _point_estimates(data, outcome_spec, mediator_spec, config, stream.child(STREAM_POINT))

    intervals, corr_intervals, failures = None, None, 0
    if config.B > 0:
        intervals, corr_intervals, failures = _bootstrap(data, outcome_spec, mediator_spec, config, stream)

    effects = EffectSet(
        measure=config.measure,
        estimator=config.estimator,
        mediators=mediator_spec.names,
        natural=point.natural,
        counterfactual=point.counterfactual,
        reduction=point.reductions(),
        intervals=intervals,
        K=config.K,
        B=config.B,
        seed=config.seed,
        n=data.n,
        family=point.med_fit.family,
        correlations=point.med_fit.correlations(),
        correlation_intervals=corr_intervals if config.rho_interval else None,
        bootstrap_failures=failures,
        average_probabilities=config.average_probabilities,
    )
    log.info(f"{effects.label('natural')} = {effects.natural:.4f}")
    return effects


def decompose_existing(
    data: Dataset,
    outcome_spec: DesignSpec,
    mediator_spec: JointMediatorSpec,
    config: DecompositionConfig,
    stream: Optional[RngStream] = None,
) -> EffectSet:
    """decompose with independently fitted per-mediator models and independent errors."""
    return decompose(data, outcome_spec, mediator_spec, replace(config, estimator=Estimator.EXISTING), stream)
