"""Tests for lib/data.py — roles, ingestion, complete-case filtering and validation."""
from __future__ import annotations

import numpy as np
import pandas as pd
import pytest

from lib.data import (
    Dataset,
    MediatorKind,
    load_dataset,
    make_roles,
    save_dataset,
    summarize_groups,
)
from lib.errors import ConfigurationError, ValidationError


ROLES = make_roles("Y", "A", [("M1", "continuous"), ("M2", "binary")], ["C"])


def _frame(**overrides) -> pd.DataFrame:
    base = {
        "Y": [0, 1, 1, 0, 1, 0],
        "A": [0, 0, 0, 1, 1, 1],
        "M1": [0.1, -0.3, 1.2, 0.8, 2.0, -1.1],
        "M2": [0, 1, 0, 1, 1, 0],
        "C": [1, 0, 1, 0, 1, 0],
    }
    base.update(overrides)
    return pd.DataFrame(base)


# ── Roles ───────────────────────────────────────────────────


class TestRoles:
    def test_kind_parse_aliases(self):
        assert MediatorKind.parse("Binary") is MediatorKind.BINARY
        assert MediatorKind.parse("cont") is MediatorKind.CONTINUOUS

    def test_unknown_kind(self):
        with pytest.raises(ConfigurationError, match="Unknown mediator kind"):
            MediatorKind.parse("ordinal")

    def test_one_mediator_rejected(self):
        with pytest.raises(ConfigurationError, match="2-3 mediators"):
            make_roles("Y", "A", [("M1", "binary")])

    def test_four_mediators_rejected(self):
        with pytest.raises(ConfigurationError):
            make_roles("Y", "A", [(f"M{i}", "binary") for i in range(4)])

    def test_mixed_three_rejected(self):
        with pytest.raises(ConfigurationError, match="exactly 2"):
            make_roles("Y", "A", [("M1", "binary"), ("M2", "continuous"), ("M3", "binary")])

    def test_duplicate_columns_rejected(self):
        with pytest.raises(ConfigurationError, match="distinct"):
            make_roles("Y", "A", [("M1", "binary"), ("M1", "binary")])

    def test_columns_order(self):
        assert ROLES.columns == ["Y", "A", "M1", "M2", "C"]


# ── Ingestion ───────────────────────────────────────────────


class TestFromFrame:
    def test_columns_are_float_and_read_only(self):
        data = Dataset.from_frame(_frame(), ROLES)
        assert data.n == 6
        assert data.outcome.dtype == np.float64
        with pytest.raises(ValueError):
            data.outcome[0] = 5.0

    def test_missing_column(self):
        with pytest.raises(ConfigurationError, match="not found"):
            Dataset.from_frame(_frame().drop(columns=["C"]), ROLES)

    def test_complete_case_drops_rows(self):
        df = _frame(M1=[0.1, None, 1.2, 0.8, "abc", -1.1])
        data = Dataset.from_frame(df, ROLES)
        assert data.n == 4
        assert data.dropped == 2

    def test_non_binary_outcome_names_row_and_column(self):
        with pytest.raises(ValidationError, match=r"row 3, column 'Y'"):
            Dataset.from_frame(_frame(Y=[0, 1, 2, 0, 1, 0]), ROLES)

    def test_binary_mediator_checked(self):
        with pytest.raises(ValidationError, match="'M2'"):
            Dataset.from_frame(_frame(M2=[0, 1, 0, 1, 0.5, 0]), ROLES)

    def test_empty_group(self):
        with pytest.raises(ValidationError, match="A=1 has no records"):
            Dataset.from_frame(_frame(A=[0] * 6), ROLES)

    def test_take_revalidates_groups(self):
        data = Dataset.from_frame(_frame(), ROLES)
        assert data.take(np.array([0, 3, 3])).n == 3
        with pytest.raises(ValidationError):
            data.take(np.array([0, 1, 2]))


class TestCsv:
    def test_load_and_save_round_trip(self, tmp_path):
        data = Dataset.from_frame(_frame(M1=[0.1, 1 / 3, 1.2, 0.8, 2.0, np.pi]), ROLES)
        path = save_dataset(data, tmp_path / "out.csv")
        again = load_dataset(path, ROLES)
        np.testing.assert_array_equal(again.column("M1"), data.column("M1"))

    def test_locale_style_decimal_dropped(self, tmp_path):
        path = tmp_path / "comma.csv"
        path.write_text("Y,A,M1,M2,C\n0,0,\"0,5\",1,0\n1,0,0.2,0,1\n0,1,0.4,1,1\n")
        data = load_dataset(path, ROLES)
        assert data.n == 2
        assert data.dropped == 1

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigurationError, match="not found"):
            load_dataset(tmp_path / "nope.csv", ROLES)

    def test_summarize_groups(self):
        data = Dataset.from_frame(_frame(), ROLES)
        s = summarize_groups(data)
        assert s[0]["n"] == 3 and s[1]["n"] == 3
        assert s[0]["outcome_mean"] == pytest.approx(2 / 3)
        assert s[1]["mediator_means"]["M2"] == pytest.approx(2 / 3)
