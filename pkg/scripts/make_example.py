#!/usr/bin/env python3
"""
Regenerate the bundled example: one scenario-5 dataset plus its golden EffectSet.

  python scripts/make_example.py [--check]

--check recomputes the EffectSet and compares it with the checked-in golden
file instead of overwriting it (exit 1 on any difference).
"""
from __future__ import annotations

import json
import logging
import sys
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(ROOT))

from lib.data import load_dataset, save_dataset  # noqa: E402
from lib.decompose import DecompositionConfig, EffectSet, decompose  # noqa: E402
from lib.numerics import RngStream  # noqa: E402
from lib.report import write_effects  # noqa: E402
from lib.simulation import STREAM_DATA, ScenarioConfig, generate_scenario_data, scenario_specs  # noqa: E402

log = logging.getLogger("decomp.example")

EXAMPLE_SCENARIO = 5
EXAMPLE_SEED = 20240
EXAMPLE_CONFIG = {"K": 100, "B": 20, "seed": EXAMPLE_SEED}
DATA_PATH = ROOT / "data" / "example_scenario5.csv"
GOLDEN_PATH = ROOT / "data" / "example_scenario5.golden.json"

# decomp.py flags equivalent to EXAMPLE_CONFIG on the example CSV
CLI_ARGS = [
    "--outcome", "Y", "--group", "A",
    "--mediator", "M1:continuous", "--mediator", "M2:continuous", "--confounder", "C",
    "--K", str(EXAMPLE_CONFIG["K"]), "--B", str(EXAMPLE_CONFIG["B"]), "--seed", str(EXAMPLE_SEED),
]


def write_example_data(path: Path = DATA_PATH) -> Path:
    cfg = ScenarioConfig.from_id(EXAMPLE_SCENARIO)
    data = generate_scenario_data(cfg, 0, RngStream(EXAMPLE_SEED).child(STREAM_DATA, EXAMPLE_SCENARIO))
    out = save_dataset(data, path)
    log.info(f"Wrote {data.n} rows to {out}")
    return out


def example_effects(path: Path = DATA_PATH) -> EffectSet:
    """EffectSet for the example CSV (read back from disk, as the CLI does)."""
    cfg = ScenarioConfig.from_id(EXAMPLE_SCENARIO)
    outcome_spec, mediator_spec = scenario_specs(cfg)
    data = load_dataset(path, cfg.roles)
    return decompose(data, outcome_spec, mediator_spec, DecompositionConfig(**EXAMPLE_CONFIG))


def write_example(data_path: Path = DATA_PATH, golden_path: Path = GOLDEN_PATH) -> Path:
    write_example_data(data_path)
    out = write_effects(example_effects(data_path), golden_path, "json")
    log.info(f"Wrote {out}")
    return out


def main() -> int:
    logging.basicConfig(level=logging.INFO, format="%(asctime)s [%(levelname)s] %(name)s: %(message)s", datefmt="%H:%M:%S")
    if "--check" not in sys.argv[1:]:
        write_example()
        return 0

    golden = json.loads(GOLDEN_PATH.read_text())
    fresh = example_effects().to_dict()
    if golden.get("effects") != fresh["effects"] or golden.get("correlations") != fresh["correlations"]:
        log.error(f"{GOLDEN_PATH.name} does not match a fresh run")
        return 1
    log.info(f"{GOLDEN_PATH.name} reproduced")
    return 0


if __name__ == "__main__":
    sys.exit(main())
