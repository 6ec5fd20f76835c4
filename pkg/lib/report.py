"""
Reports — machine-readable CSV/JSON for effects, oracle truths and study metrics,
plus short human-readable summaries.

Machine formats carry 17 significant digits so values round-trip exactly;
human summaries use 4.
"""
from __future__ import annotations

import json
import logging
import math
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import pandas as pd

from lib.decompose import ContrastMeasure, EffectSet
from lib.errors import ConfigurationError, ValidationError
from lib.simulation import STUDY_METRICS, MetricRow, StudyMetrics, TrueEffectSet

log = logging.getLogger("decomp.report")

FORMATS = ("json", "csv")
FLOAT_FORMAT = "%.17g"
STUDY_COLUMNS = ["scenario", "estimator", "effect", "metric", "value"]
EFFECT_COLUMNS = ["estimator", "measure", "kind", "name", "estimate", "lower", "upper", "K", "B", "seed", "n"]
TRUTH_COLUMNS = ["scenario", "measure", "name", "estimate", "se", "mc_samples", "mc_repeats"]

PathLike = Union[str, Path]


def _format_of(path: Path, fmt: Optional[str]) -> str:
    fmt = (fmt or path.suffix.lstrip(".") or "json").lower()
    if fmt not in FORMATS:
        raise ConfigurationError(f"Unknown report format '{fmt}' (use json or csv)")
    return fmt


def _write_json(payload: Dict, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, default=str) + "\n")
    return path


def _write_csv(df: pd.DataFrame, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    df.to_csv(path, index=False, float_format=FLOAT_FORMAT)
    return path


def _read_json(path: Path) -> Dict:
    try:
        return json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigurationError(f"Report not found: {path}")
    except json.JSONDecodeError as e:
        raise ValidationError(f"{path} is not valid JSON: {e}")


def _read_csv(path: Path, dtype: Optional[Dict] = None) -> pd.DataFrame:
    try:
        return pd.read_csv(path, dtype=dtype)
    except FileNotFoundError:
        raise ConfigurationError(f"Report not found: {path}")
    except pd.errors.EmptyDataError:
        raise ValidationError(f"Report is empty: {path}")
    except pd.errors.ParserError as e:
        raise ValidationError(f"{path} is not valid CSV: {str(e).strip()}")


def _opt(value) -> Optional[float]:
    if value is None:
        return None
    value = float(value)
    return None if math.isnan(value) else value


# ── EffectSet ────────────────────────────────────────────────

def effects_frame(effects: EffectSet) -> pd.DataFrame:
    rows = []
    common = {
        "estimator": effects.estimator.value, "measure": effects.measure.value,
        "K": effects.K, "B": effects.B, "seed": str(effects.seed), "n": effects.n,
    }
    for name, value in effects.estimates().items():
        ci = effects.interval(name)
        rows.append({**common, "kind": "effect", "name": effects.label(name), "estimate": value,
                     "lower": None if ci is None else ci[0], "upper": None if ci is None else ci[1]})
    for pair, rho in effects.correlations.items():
        ci = effects.correlation_intervals[pair] if effects.correlation_intervals else None
        rows.append({**common, "kind": "correlation", "name": pair, "estimate": rho,
                     "lower": None if ci is None else ci[0], "upper": None if ci is None else ci[1]})
    return pd.DataFrame(rows, columns=EFFECT_COLUMNS)


def write_effects(effects: EffectSet, path: PathLike, fmt: Optional[str] = None,
                  extra: Optional[Dict] = None) -> Path:
    """EffectSet as JSON (with `extra` diagnostics) or CSV (one row per quantity)."""
    path = Path(path)
    if _format_of(path, fmt) == "csv":
        return _write_csv(effects_frame(effects), path)
    payload = effects.to_dict()
    if extra:
        payload.update(extra)
    return _write_json(payload, path)


def load_effects(path: PathLike) -> EffectSet:
    path = Path(path)
    if _format_of(path, None) == "json":
        return EffectSet.from_dict(_read_json(path))

    df = _read_csv(path, dtype={"seed": str})
    if df.empty:
        raise ValidationError(f"{path} has no rows")
    first = df.iloc[0]
    measure = ContrastMeasure.parse(first["measure"])
    raw = {
        "measure": measure.value,
        "estimator": first["estimator"],
        "mediators": [],
        "K": int(first["K"]), "B": int(first["B"]), "seed": int(first["seed"]), "n": int(first["n"]),
        "effects": {}, "correlations": {},
    }
    for row in df.itertuples(index=False):
        entry = {"estimate": float(row.estimate), "lower": _opt(row.lower), "upper": _opt(row.upper)}
        if row.kind == "effect":
            raw["effects"][row.name] = entry
        else:
            raw["correlations"][row.name] = entry
    names = set()
    for pair in raw["correlations"]:
        names.update(pair.split("~"))
    raw["mediators"] = sorted(names)
    return EffectSet.from_dict(raw)


def format_effects(effects: EffectSet) -> str:
    lines = [
        f"{effects.estimator.value} estimator ({effects.family}), {effects.measure.prefix} scale, "
        f"n={effects.n} K={effects.K} B={effects.B} seed={effects.seed}"
    ]
    for name, value in effects.estimates().items():
        ci = effects.interval(name)
        ci_text = "" if ci is None else f"  ({ci[0]:.4g}, {ci[1]:.4g})"
        lines.append(f"  {effects.label(name):14s} {value:.4g}{ci_text}")
    for pair, rho in effects.correlations.items():
        ci = effects.correlation_intervals[pair] if effects.correlation_intervals else None
        ci_text = "" if ci is None else f"  ({ci[0]:.3g}, {ci[1]:.3g})"
        lines.append(f"  rho {pair:10s} {rho:.3g}{ci_text}")
    if effects.bootstrap_failures:
        lines.append(f"  {effects.bootstrap_failures} bootstrap resamples dropped")
    return "\n".join(lines)


# ── TrueEffectSet ────────────────────────────────────────────

def truth_frame(truth: TrueEffectSet) -> pd.DataFrame:
    rows = [
        {"scenario": truth.scenario, "measure": truth.measure.value, "name": truth.label(name),
         "estimate": value, "se": truth.se[name], "mc_samples": truth.mc_samples, "mc_repeats": truth.mc_repeats}
        for name, value in truth.estimates().items()
    ]
    rows += [
        {"scenario": truth.scenario, "measure": truth.measure.value, "name": f"risk_{key}",
         "estimate": value, "se": truth.risk_se[key], "mc_samples": truth.mc_samples, "mc_repeats": truth.mc_repeats}
        for key, value in truth.risks.items()
    ]
    return pd.DataFrame(rows, columns=TRUTH_COLUMNS)


def write_truth(truth: TrueEffectSet, path: PathLike, fmt: Optional[str] = None) -> Path:
    path = Path(path)
    if _format_of(path, fmt) == "csv":
        return _write_csv(truth_frame(truth), path)
    return _write_json(truth.to_dict(), path)


def format_truth(truth: TrueEffectSet) -> str:
    lines = [f"Scenario {truth.scenario} truth ({truth.mc_samples} samples x {truth.mc_repeats} repeats)"]
    for name, value in truth.estimates().items():
        lines.append(f"  {truth.label(name):14s} {value:.4f}  (SE {truth.se[name]:.2g})")
    return "\n".join(lines)


# ── Study metrics ────────────────────────────────────────────

def study_frame(metrics: Sequence[StudyMetrics]) -> pd.DataFrame:
    rows = [
        {"scenario": m.scenario, "estimator": row.estimator, "effect": row.effect, "metric": metric,
         "value": row.metric(metric)}
        for m in metrics for row in m.rows for metric in STUDY_METRICS
    ]
    return pd.DataFrame(rows, columns=STUDY_COLUMNS)


def study_to_dict(m: StudyMetrics) -> Dict:
    return {
        "scenario": m.scenario,
        "measure": m.measure.value,
        "replicates": m.replicates,
        "failures": m.failures,
        "seed": m.seed,
        "config": m.config,
        "truth": m.truth.to_dict() if m.truth else None,
        "rows": [
            {"estimator": r.estimator, "effect": r.effect, "percent_bias": r.percent_bias,
             "ci_width": r.ci_width, "coverage": r.coverage, "mean_estimate": r.mean_estimate, "truth": r.truth}
            for r in m.rows
        ],
    }


def study_from_dict(raw: Dict) -> StudyMetrics:
    return StudyMetrics(
        scenario=str(raw["scenario"]),
        measure=ContrastMeasure.parse(raw["measure"]),
        rows=[MetricRow(**r) for r in raw["rows"]],
        replicates=raw.get("replicates", 0),
        failures=raw.get("failures", 0),
        seed=raw.get("seed", 0),
        truth=TrueEffectSet.from_dict(raw["truth"]) if raw.get("truth") else None,
        config=raw.get("config", {}),
    )


def emit_report(metrics: Sequence[StudyMetrics], path: PathLike, fmt: Optional[str] = None) -> Path:
    """Study metrics table keyed by scenario x estimator x effect x metric.

    CSV holds the metric table only; JSON mirrors it with truths, failure
    counts and the study configuration.
    """
    path = Path(path)
    fmt = _format_of(path, fmt)
    if fmt == "csv":
        out = _write_csv(study_frame(metrics), path)
    else:
        out = _write_json({"studies": [study_to_dict(m) for m in metrics]}, path)
    log.info(f"Wrote {sum(len(m.rows) for m in metrics)} metric rows to {out}")
    return out


def load_report(path: PathLike) -> List[StudyMetrics]:
    """Inverse of emit_report. CSV reloads carry metrics only."""
    path = Path(path)
    if _format_of(path, None) == "json":
        return [study_from_dict(raw) for raw in _read_json(path).get("studies", [])]

    df = _read_csv(path)
    missing = [c for c in STUDY_COLUMNS if c not in df.columns]
    if missing:
        raise ValidationError(f"{path} is missing report columns {missing}")
    df["scenario"] = df["scenario"].astype(str)
    studies = []
    for scenario, block in df.groupby("scenario", sort=False):
        rows = []
        for (estimator, effect), cells in block.groupby(["estimator", "effect"], sort=False):
            values = dict(zip(cells["metric"], cells["value"].astype(float)))
            rows.append(MetricRow(estimator=estimator, effect=effect,
                                  **{m: values.get(m, float("nan")) for m in STUDY_METRICS}))
        measure = ContrastMeasure.parse(rows[0].effect.split("_", 1)[0])
        studies.append(StudyMetrics(scenario=scenario, measure=measure, rows=rows))
    return studies


def format_study(metrics: Sequence[StudyMetrics]) -> str:
    lines = []
    for m in metrics:
        lines.append(f"Scenario {m.scenario} ({m.replicates} replicates, {m.failures} failed)")
        for row in m.rows:
            lines.append(
                f"  {row.estimator:9s} {row.effect:10s} bias {row.percent_bias:+7.2f}%  "
                f"width {row.ci_width:.4f}  coverage {row.coverage:.3f}"
            )
    return "\n".join(lines)
