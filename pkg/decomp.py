#!/usr/bin/env python3
"""
corrmed — causal decomposition analysis with correlated mediators

Modes:
  decomp.py decompose    Fit outcome + joint mediator models on a CSV, report effects with bootstrap CIs
  decomp.py simulate     Run the simulation study for one or more scenarios (1-18)
  decomp.py oracle       Monte Carlo true effects for a scenario
  decomp.py report       Summarize or convert a study report (CSV <-> JSON)

Exit codes: 0 success, 2 usage/configuration, 3 data validation,
4 model fitting, 5 degenerate contrast.
"""
from __future__ import annotations

import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional

# Load .env (won't override existing env vars)
from dotenv import load_dotenv
load_dotenv(Path(__file__).parent / ".env")

from lib.config import RunConfig, load_run_config
from lib.errors import DecompError, UsageError

log = logging.getLogger("decomp")


def _emit(payload: dict) -> None:
    print(json.dumps(payload, indent=2, default=str))


def cmd_decompose(cfg: RunConfig) -> None:
    """Decomposition of a user dataset."""
    from lib.data import load_dataset, make_roles, summarize_groups
    from lib.decompose import DecompositionConfig, decompose
    from lib.joint import JointMediatorSpec, covariance_equality_check
    from lib.regression import DesignSpec
    from lib.report import format_effects, write_effects

    roles = make_roles(cfg.outcome, cfg.group, cfg.mediators, cfg.confounders)
    data = load_dataset(cfg.data, roles)
    groups = summarize_groups(data)
    for g, s in groups.items():
        means = ", ".join(f"{m}={v:.4g}" for m, v in s["mediator_means"].items())
        log.info(f"Group {g}: n={s['n']} outcome mean={s['outcome_mean']:.4g} {means}")

    outcome_spec = DesignSpec.outcome(roles, interaction=cfg.interaction)
    mediator_spec = JointMediatorSpec.from_roles(roles)
    dconfig = DecompositionConfig(
        K=cfg.K, B=cfg.B, measure=cfg.measure, estimator=cfg.estimator, seed=cfg.seed,
        workers=cfg.workers, average_probabilities=cfg.average_probabilities, rho_interval=cfg.rho_interval,
    )
    effects = decompose(data, outcome_spec, mediator_spec, dconfig)

    extra = {"groups": groups, "dropped_rows": data.dropped, "interaction": cfg.interaction}
    if cfg.covariance_check:
        extra["covariance_check"] = covariance_equality_check(data, mediator_spec)

    if cfg.out:
        path = write_effects(effects, cfg.out, cfg.format, extra=extra)
        print(format_effects(effects))
        if cfg.covariance_check:
            print(f"  covariance check: max |Sigma1 - Sigma0| = {extra['covariance_check']['max_abs_difference']:.4g}")
        print(f"Wrote {path}")
    else:
        _emit({**effects.to_dict(), **extra})


def cmd_simulate(cfg: RunConfig) -> None:
    """Simulation study over the requested scenarios."""
    from lib.decompose import DecompositionConfig
    from lib.report import emit_report, format_study, study_to_dict
    from lib.simulation import ScenarioConfig, run_study

    dconfig = DecompositionConfig(K=cfg.K, B=cfg.B, measure=cfg.measure, seed=cfg.seed,
                                  average_probabilities=cfg.average_probabilities)
    metrics = []
    for sid in cfg.scenarios:
        scenario = ScenarioConfig.from_id(sid, n=cfg.n, replicates=cfg.replicates, measure=cfg.measure)
        metrics.append(run_study(scenario, dconfig, workers=cfg.workers,
                                 oracle_samples=cfg.mc_samples, oracle_repeats=cfg.mc_repeats))

    if cfg.out:
        path = emit_report(metrics, cfg.out, cfg.format)
        if path.suffix == ".csv":
            emit_report(metrics, Path(path).with_suffix(".json"), "json")
        print(format_study(metrics))
        print(f"Wrote {path}")
    else:
        _emit({"studies": [study_to_dict(m) for m in metrics]})


def cmd_oracle(cfg: RunConfig) -> None:
    """True effects for one scenario."""
    from lib.numerics import RngStream
    from lib.report import format_truth, write_truth
    from lib.simulation import STREAM_ORACLE, ScenarioConfig, oracle_true_effects

    sid = cfg.scenarios[0]
    scenario = ScenarioConfig.from_id(sid, n=cfg.n, measure=cfg.measure)
    if cfg.inert:
        scenario = replace(scenario.with_coefficients(y_m1=0.0, y_m2=0.0),
                           theta=(scenario.theta[0], scenario.theta[1], 0.0))
    truth = oracle_true_effects(scenario, cfg.mc_samples, cfg.mc_repeats, RngStream(cfg.seed).child(STREAM_ORACLE, sid))

    if cfg.out:
        path = write_truth(truth, cfg.out, cfg.format)
        print(format_truth(truth))
        print(f"Wrote {path}")
    else:
        _emit(truth.to_dict())


def cmd_report(cfg: RunConfig) -> None:
    """Print a study report; with --out, rewrite it in --format."""
    from lib.report import emit_report, format_study, load_report

    metrics = load_report(cfg.input)
    print(format_study(metrics))
    if cfg.out:
        print(f"Wrote {emit_report(metrics, cfg.out, cfg.format)}")


COMMANDS = {
    "decompose": cmd_decompose,
    "simulate": cmd_simulate,
    "oracle": cmd_oracle,
    "report": cmd_report,
}


def main(argv: Optional[List[str]] = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    if not argv or argv[0] not in COMMANDS:
        print(__doc__, file=sys.stderr)
        print(f"Commands: {', '.join(COMMANDS.keys())}", file=sys.stderr)
        return UsageError.exit_code

    try:
        cfg, args = load_run_config(argv[0], argv[1:])
        level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
        logging.basicConfig(
            level=level,
            format="%(asctime)s [%(levelname)s] %(name)s: %(message)s",
            datefmt="%H:%M:%S",
        )
        logging.getLogger().setLevel(level)
        COMMANDS[argv[0]](cfg)
    except DecompError as e:
        print(f"error: {e.kind}: {e.message}", file=sys.stderr)
        return e.exit_code
    return 0


def cli() -> None:
    sys.exit(main())


if __name__ == "__main__":
    cli()
