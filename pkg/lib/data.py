"""
Dataset ingestion and validation for decomposition analysis.

A Dataset holds the role columns only (outcome Y, group A, mediators, confounders)
as read-only float64 arrays. Ingestion is complete-case on role columns: rows with
a missing, non-numeric or non-finite value in any role column are dropped and
counted. Numeric parsing is locale-independent (decimal point only).
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from lib.errors import ConfigurationError, ValidationError

log = logging.getLogger("decomp.data")

MIN_MEDIATORS = 2
MAX_MEDIATORS = 3


class MediatorKind(str, Enum):
    BINARY = "binary"
    CONTINUOUS = "continuous"

    @classmethod
    def parse(cls, raw: Union[str, "MediatorKind"]) -> "MediatorKind":
        if isinstance(raw, MediatorKind):
            return raw
        key = raw.strip().lower()
        if key in ("binary", "bin", "b", "probit"):
            return cls.BINARY
        if key in ("continuous", "cont", "c", "normal", "n"):
            return cls.CONTINUOUS
        raise ConfigurationError(f"Unknown mediator kind '{raw}' (use binary or continuous)")


@dataclass(frozen=True)
class VariableRoles:
    outcome: str
    group: str
    mediators: Tuple[Tuple[str, MediatorKind], ...]
    confounders: Tuple[str, ...] = ()

    def __post_init__(self):
        meds = tuple((name, MediatorKind.parse(kind)) for name, kind in self.mediators)
        object.__setattr__(self, "mediators", meds)
        object.__setattr__(self, "confounders", tuple(self.confounders))

        if not MIN_MEDIATORS <= len(meds) <= MAX_MEDIATORS:
            raise ConfigurationError(
                f"Need {MIN_MEDIATORS}-{MAX_MEDIATORS} mediators, got {len(meds)}"
            )
        kinds = {k for _, k in meds}
        if len(kinds) > 1 and len(meds) != 2:
            raise ConfigurationError(
                "Mixed binary/continuous mediators are supported for exactly 2 mediators"
            )
        names = self.columns
        dupes = sorted({n for n in names if names.count(n) > 1})
        if dupes:
            raise ConfigurationError(f"Role columns must be distinct, repeated: {dupes}")

    @property
    def mediator_names(self) -> List[str]:
        return [name for name, _ in self.mediators]

    @property
    def mediator_kinds(self) -> List[MediatorKind]:
        return [kind for _, kind in self.mediators]

    @property
    def columns(self) -> List[str]:
        return [self.outcome, self.group, *self.mediator_names, *self.confounders]


@dataclass(frozen=True, eq=False)
class Dataset:
    """Validated, immutable analysis dataset. Build with `Dataset.from_frame`."""

    roles: VariableRoles
    columns: Dict[str, np.ndarray]
    dropped: int = 0
    source: Optional[str] = field(default=None, compare=False)

    @property
    def n(self) -> int:
        return len(self.columns[self.roles.outcome])

    @property
    def outcome(self) -> np.ndarray:
        return self.columns[self.roles.outcome]

    @property
    def group(self) -> np.ndarray:
        return self.columns[self.roles.group]

    def column(self, name: str) -> np.ndarray:
        try:
            return self.columns[name]
        except KeyError:
            raise ConfigurationError(f"Column '{name}' is not a role column of this dataset")

    def frame(self) -> pd.DataFrame:
        return pd.DataFrame({name: self.columns[name] for name in self.roles.columns})

    def take(self, indices: np.ndarray) -> "Dataset":
        """Row subset (with repetition allowed), used for bootstrap resamples."""
        cols = {name: _frozen(values[indices]) for name, values in self.columns.items()}
        out = Dataset(roles=self.roles, columns=cols, dropped=0, source=self.source)
        _validate(out, row_labels=None)
        return out

    def group_counts(self) -> Tuple[int, int]:
        a = self.group
        n1 = int(np.count_nonzero(a == 1))
        return len(a) - n1, n1

    @classmethod
    def from_frame(
        cls,
        df: pd.DataFrame,
        roles: VariableRoles,
        source: Optional[str] = None,
    ) -> "Dataset":
        """Complete-case filter, coerce to float64, validate."""
        missing = [c for c in roles.columns if c not in df.columns]
        if missing:
            raise ConfigurationError(f"Columns not found in data: {missing}")

        numeric = pd.DataFrame(index=df.index)
        for name in roles.columns:
            col = df[name]
            if pd.api.types.is_numeric_dtype(col):
                numeric[name] = col.astype("float64")
                continue
            text = pd.Series(col.astype(str).str.strip().to_numpy(dtype=object), index=df.index)
            numeric[name] = pd.to_numeric(text, errors="coerce").astype("float64")

        finite = np.isfinite(numeric.to_numpy()).all(axis=1)
        dropped = int((~finite).sum())
        if dropped:
            log.warning(f"Dropped {dropped} of {len(numeric)} rows with missing or non-numeric role values")
        kept = numeric.loc[finite]

        cols = {name: _frozen(kept[name].to_numpy(dtype=np.float64, copy=True)) for name in roles.columns}
        data = cls(roles=roles, columns=cols, dropped=dropped, source=source)
        _validate(data, row_labels=kept.index.to_numpy())
        return data


def _frozen(values: np.ndarray) -> np.ndarray:
    values = np.ascontiguousarray(values, dtype=np.float64)
    values.flags.writeable = False
    return values


def _check_binary(data: Dataset, name: str, row_labels: Optional[np.ndarray]) -> None:
    values = data.column(name)
    bad = np.flatnonzero((values != 0.0) & (values != 1.0))
    if bad.size:
        i = int(bad[0])
        row = int(row_labels[i]) + 1 if row_labels is not None else i + 1
        raise ValidationError(
            f"row {row}, column '{name}': value {values[i]:g} not in {{0, 1}}"
            + (f" ({bad.size} offending rows)" if bad.size > 1 else "")
        )


def _validate(data: Dataset, row_labels: Optional[np.ndarray]) -> None:
    roles = data.roles
    _check_binary(data, roles.outcome, row_labels)
    _check_binary(data, roles.group, row_labels)
    for name, kind in roles.mediators:
        if kind is MediatorKind.BINARY:
            _check_binary(data, name, row_labels)

    n0, n1 = data.group_counts()
    if n0 == 0 or n1 == 0:
        empty = 0 if n0 == 0 else 1
        raise ValidationError(f"Group {roles.group}={empty} has no records after ingestion")


# ── Ingestion ────────────────────────────────────────────────

def load_dataset(path: Union[str, Path], roles: VariableRoles) -> Dataset:
    """Read a CSV with a header row and return a validated Dataset.

    Every cell is read as text and parsed with `pd.to_numeric`, so the
    process locale never affects decimal handling.
    """
    path = Path(path)
    try:
        df = pd.read_csv(path, dtype=str, keep_default_na=False, skipinitialspace=True)
    except FileNotFoundError:
        raise ConfigurationError(f"Data file not found: {path}")
    except pd.errors.EmptyDataError:
        raise ValidationError(f"Data file is empty: {path}")
    except pd.errors.ParserError as e:
        raise ValidationError(f"Data file {path} is not valid CSV: {str(e).strip()}")

    data = Dataset.from_frame(df, roles, source=str(path))
    log.info(f"Loaded {data.n} records from {path.name} ({data.dropped} dropped)")
    return data


def save_dataset(data: Dataset, path: Union[str, Path]) -> Path:
    """Write role columns as CSV with 17 significant digits (exact float64 round trip)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data.frame().to_csv(path, index=False, float_format="%.17g")
    return path


def make_roles(
    outcome: str,
    group: str,
    mediators: Sequence[Tuple[str, Union[str, MediatorKind]]],
    confounders: Sequence[str] = (),
) -> VariableRoles:
    return VariableRoles(
        outcome=outcome,
        group=group,
        mediators=tuple((name, MediatorKind.parse(kind)) for name, kind in mediators),
        confounders=tuple(confounders),
    )


# ── Summaries ────────────────────────────────────────────────

def _mean(values: np.ndarray) -> float:
    return math.fsum(values.tolist()) / len(values)


def summarize_groups(data: Dataset) -> Dict[int, Dict]:
    """Per-group n, outcome mean and mediator means."""
    summary = {}
    a = data.group
    for g in (0, 1):
        mask = a == g
        summary[g] = {
            "n": int(mask.sum()),
            "outcome_mean": _mean(data.outcome[mask]),
            "mediator_means": {
                name: _mean(data.column(name)[mask]) for name in data.roles.mediator_names
            },
        }
    return summary
