"""
Run configuration — defaults < environment < key-value config file < flags.

Environment:
  DECOMP_SEED      default master seed
  DECOMP_WORKERS   default worker count

Config file: one `key = value` per line, `#` comments. `mediator`, `confounder`
and `scenario` may repeat. Keys use the long flag names (dashes or underscores).
"""
from __future__ import annotations

import argparse
import logging
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

from lib.data import MediatorKind
from lib.errors import ConfigurationError, UsageError

log = logging.getLogger("decomp.config")

COMMAND_NAMES = ("decompose", "simulate", "oracle", "report")
REPEATABLE = {"mediator", "confounder", "scenario"}
BOOLEAN = {"interaction", "covariance_check", "rho_interval", "average_probabilities", "inert"}
TRUE_WORDS = {"1", "true", "yes", "on"}
FALSE_WORDS = {"0", "false", "no", "off"}


@dataclass
class RunConfig:
    command: str
    data: Optional[Path] = None
    outcome: Optional[str] = None
    group: Optional[str] = None
    mediators: List[Tuple[str, MediatorKind]] = field(default_factory=list)
    confounders: List[str] = field(default_factory=list)
    interaction: bool = True
    estimator: str = "proposed"
    K: int = 500
    B: int = 200
    measure: str = "rr"
    seed: int = 0
    scenarios: List[int] = field(default_factory=list)
    replicates: int = 200
    n: int = 500
    workers: int = 1
    mc_samples: int = 100_000
    mc_repeats: int = 100
    out: Optional[Path] = None
    format: Optional[str] = None
    input: Optional[Path] = None
    covariance_check: bool = False
    rho_interval: bool = False
    average_probabilities: bool = False
    inert: bool = False

    def validate(self) -> "RunConfig":
        if self.command not in COMMAND_NAMES:
            raise UsageError(f"Unknown command '{self.command}' (use {', '.join(COMMAND_NAMES)})")
        for name, minimum in (("K", 1), ("B", 0), ("replicates", 1), ("n", 2), ("workers", 1),
                              ("mc_samples", 1), ("mc_repeats", 1)):
            if getattr(self, name) < minimum:
                raise ConfigurationError(f"{name} must be >= {minimum}, got {getattr(self, name)}")
        if not 0 <= self.seed < 2 ** 64:
            raise ConfigurationError(f"seed must be a 64-bit unsigned integer, got {self.seed}")
        if self.format is not None and self.format not in ("json", "csv"):
            raise ConfigurationError(f"format must be json or csv, got '{self.format}'")
        if self.estimator not in ("proposed", "existing"):
            raise ConfigurationError(f"estimator must be proposed or existing, got '{self.estimator}'")
        if self.measure not in ("rr", "rd"):
            raise ConfigurationError(f"measure must be rr or rd, got '{self.measure}'")

        if self.command == "decompose":
            for flag in ("data", "outcome", "group"):
                if getattr(self, flag) is None:
                    raise UsageError(f"decompose requires --{flag}")
            if len(self.mediators) < 2:
                raise UsageError("decompose requires at least two --mediator name:kind")
        elif self.command in ("simulate", "oracle"):
            if not self.scenarios:
                raise UsageError(f"{self.command} requires --scenario")
            bad = [s for s in self.scenarios if not 1 <= s <= 18]
            if bad:
                raise UsageError(f"Unknown scenario {bad[0]} (valid: 1-18)")
            if self.command == "oracle" and len(self.scenarios) != 1:
                raise UsageError("oracle takes exactly one --scenario")
        elif self.command == "report" and self.input is None:
            raise UsageError("report requires --input")
        return self


# ── Parsing ──────────────────────────────────────────────────

def _key(raw: str) -> str:
    return raw.strip().lstrip("-").replace("-", "_").lower()


def parse_mediator(raw: str) -> Tuple[str, MediatorKind]:
    name, sep, kind = raw.rpartition(":")
    if not sep or not name.strip():
        raise UsageError(f"Mediators are given as name:kind, got '{raw}'")
    return name.strip(), MediatorKind.parse(kind)


def _int(key: str, raw: str) -> int:
    try:
        return int(str(raw).strip())
    except ValueError:
        raise ConfigurationError(f"{key} must be an integer, got '{raw}'")


def _bool(key: str, raw: str) -> bool:
    word = str(raw).strip().lower()
    if word in TRUE_WORDS:
        return True
    if word in FALSE_WORDS:
        return False
    raise ConfigurationError(f"{key} must be true or false, got '{raw}'")


def read_config_file(path: Path) -> Dict[str, List[str]]:
    """Raw values per normalized key, in file order."""
    try:
        text = Path(path).read_text()
    except FileNotFoundError:
        raise ConfigurationError(f"Config file not found: {path}")
    values: Dict[str, List[str]] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigurationError(f"{path}:{lineno}: expected key = value")
        values.setdefault(_key(key), []).append(value.strip())
    return values


_FIELD_FOR = {"mediator": "mediators", "confounder": "confounders", "scenario": "scenarios"}
_KNOWN = {f.name for f in fields(RunConfig)} - {"command", "mediators", "confounders", "scenarios"}
_KNOWN |= set(_FIELD_FOR)
_KEY_CASE = {"k": "K", "b": "B"}


def _apply(cfg: RunConfig, key: str, raw: Sequence[str], source: str) -> None:
    key = _KEY_CASE.get(key, key)
    if key not in _KNOWN:
        raise ConfigurationError(f"Unknown setting '{key}' in {source}")
    if key in REPEATABLE:
        if key == "mediator":
            cfg.mediators = [parse_mediator(v) for v in raw]
        elif key == "confounder":
            cfg.confounders = [v.strip() for v in raw]
        else:
            cfg.scenarios = [_int("scenario", v) for v in raw]
        return
    if len(raw) > 1:
        raise ConfigurationError(f"Setting '{key}' given more than once in {source}")
    value = raw[0]
    current = getattr(cfg, key)
    if key in BOOLEAN:
        setattr(cfg, key, _bool(key, value))
    elif key in ("data", "out", "input"):
        setattr(cfg, key, Path(value))
    elif isinstance(current, int) and not isinstance(current, bool):
        setattr(cfg, key, _int(key, value))
    else:
        setattr(cfg, key, str(value).strip().lower() if key in ("estimator", "measure", "format") else str(value))


def build_parser(command: str) -> argparse.ArgumentParser:
    parser = _Parser(prog=f"decomp.py {command}")
    parser.add_argument("--config", type=Path, help="key = value settings file")
    parser.add_argument("--data", help="input CSV with a header row")
    parser.add_argument("--outcome")
    parser.add_argument("--group")
    parser.add_argument("--mediator", action="append", help="name:kind (binary|continuous), repeatable")
    parser.add_argument("--confounder", action="append")
    parser.add_argument("--interaction", action=argparse.BooleanOptionalAction, default=None)
    parser.add_argument("--estimator", choices=["proposed", "existing"])
    parser.add_argument("--K", "-K", dest="K")
    parser.add_argument("--B", "-B", dest="B")
    parser.add_argument("--measure", choices=["rr", "rd"])
    parser.add_argument("--seed")
    parser.add_argument("--scenario", action="append")
    parser.add_argument("--replicates")
    parser.add_argument("--n")
    parser.add_argument("--workers")
    parser.add_argument("--mc-samples", dest="mc_samples")
    parser.add_argument("--mc-repeats", dest="mc_repeats")
    parser.add_argument("--out")
    parser.add_argument("--format", choices=["json", "csv"])
    parser.add_argument("--input", help="report file to summarize or convert")
    parser.add_argument("--covariance-check", dest="covariance_check", action="store_const", const=True)
    parser.add_argument("--rho-interval", dest="rho_interval", action="store_const", const=True)
    parser.add_argument("--average-probabilities", dest="average_probabilities", action="store_const", const=True)
    parser.add_argument("--inert", action="store_const", const=True, help="zero the mediator effects on the outcome")
    parser.add_argument("--verbose", "-v", action="store_true")
    parser.add_argument("--quiet", "-q", action="store_true")
    return parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def load_run_config(
    command: str,
    argv: Sequence[str],
    env: Optional[Mapping[str, str]] = None,
) -> Tuple[RunConfig, argparse.Namespace]:
    """Parse flags for `command` and layer them over config file, environment and defaults."""
    env = os.environ if env is None else env
    args = build_parser(command).parse_args(list(argv))
    cfg = RunConfig(command=command)

    if env.get("DECOMP_SEED"):
        cfg.seed = _int("DECOMP_SEED", env["DECOMP_SEED"])
    if env.get("DECOMP_WORKERS"):
        cfg.workers = _int("DECOMP_WORKERS", env["DECOMP_WORKERS"])

    if args.config is not None:
        for key, raw in read_config_file(args.config).items():
            _apply(cfg, key, raw, str(args.config))

    for key, value in vars(args).items():
        if value is None or key in ("config", "verbose", "quiet"):
            continue
        if key == "interaction":
            cfg.interaction = value
            continue
        raw = value if isinstance(value, list) else [value]
        _apply(cfg, key, [str(v) for v in raw], "flags")
    return cfg.validate(), args
