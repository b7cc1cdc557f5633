"""Long-format dataset ingestion, validation and CSV round-trip."""

import numpy as np
import pandas as pd
import pytest

from seqtrial.datamodel import (
    CENSORED,
    ID,
    OUTCOME,
    TREATMENT,
    VISIT,
    Schema,
    StructureError,
    ValueDomainError,
    from_frame,
    load_csv,
    validate,
    write_csv,
)


def frame(rows, extra=None):
    base = pd.DataFrame(rows, columns=[ID, VISIT, TREATMENT, OUTCOME, CENSORED])
    if extra:
        for k, v in extra.items():
            base[k] = v
    return base


def good_frame():
    return frame(
        [
            ("a", 0, 0, 0, 0),
            ("a", 1, 1, 0, 0),
            ("a", 2, 1, 1, 0),
            ("b", 0, 0, 0, 0),
            ("b", 1, 0, 0, 1),
        ],
        extra={"x1": [0.1, 0.2, 0.3, -0.5, -0.6], "x2": [1.0, 1.0, 1.0, 2.0, 2.0]},
    )


class TestFromFrame:
    def test_valid_frame_accepted(self):
        ds = from_frame(good_frame(), tv_cols=("x1",), static_cols=("x2",))
        assert ds.n_patients == 2
        assert ds.n_visits == 3
        assert list(ds.static.loc["a"]) == [1.0]

    def test_static_collected_from_first_row(self):
        ds = from_frame(good_frame(), tv_cols=("x1",), static_cols=("x2",))
        assert float(ds.static.loc["b", "x2"]) == 2.0

    def test_non_binary_treatment_rejected(self):
        f = good_frame()
        f.loc[0, TREATMENT] = 2
        with pytest.raises(ValueDomainError):
            from_frame(f, tv_cols=("x1",), static_cols=("x2",))

    def test_missing_covariate_rejected(self):
        f = good_frame()
        f.loc[1, "x1"] = np.nan
        with pytest.raises(ValueDomainError):
            from_frame(f, tv_cols=("x1",), static_cols=("x2",))

    def test_row_after_outcome_rejected(self):
        f = frame(
            [("a", 0, 0, 1, 0), ("a", 1, 0, 0, 0)],
            extra={"x1": [0.0, 0.0]},
        )
        with pytest.raises(StructureError):
            from_frame(f, tv_cols=("x1",), static_cols=())

    def test_gap_in_visits_rejected(self):
        f = frame(
            [("a", 0, 0, 0, 0), ("a", 2, 0, 0, 0)],
            extra={"x1": [0.0, 0.0]},
        )
        with pytest.raises(StructureError):
            from_frame(f, tv_cols=("x1",), static_cols=())

    def test_row_order_irrelevant(self):
        f = good_frame()
        shuffled = f.sample(frac=1.0, random_state=0)
        d1 = from_frame(f, tv_cols=("x1",), static_cols=("x2",))
        d2 = from_frame(shuffled, tv_cols=("x1",), static_cols=("x2",))
        pd.testing.assert_frame_equal(d1.visits, d2.visits)


class TestValidate:
    def test_findings_are_data(self):
        f = frame(
            [("a", 0, 0, 0, 1), ("a", 1, 0, 0, 0)],
            extra={"x1": [0.0, 0.0]},
        )
        ds = from_frame(f, tv_cols=("x1",), static_cols=(), check=False)
        report = validate(ds)
        assert not report.ok
        assert any("after censoring" in fi.message for fi in report.findings)

    def test_clean_dataset_ok(self):
        ds = from_frame(good_frame(), tv_cols=("x1",), static_cols=("x2",))
        assert validate(ds).ok


class TestCsvRoundTrip:
    def test_write_then_load_identical(self, tmp_path):
        ds = from_frame(good_frame(), tv_cols=("x1",), static_cols=("x2",))
        path = tmp_path / "d.csv"
        schema = Schema(
            id=ID, visit=VISIT, treatment=TREATMENT, outcome=OUTCOME,
            censor=CENSORED, tv_covariates=("x1",), static_covariates=("x2",),
        )
        write_csv(ds, path, schema)
        ds2 = load_csv(path, schema)
        pd.testing.assert_frame_equal(
            ds.visits.reset_index(drop=True), ds2.visits.reset_index(drop=True),
            check_dtype=False,
        )

    def test_missing_column_reported(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("id,visit,treatment\n1,0,0\n")
        with pytest.raises(Exception) as err:
            load_csv(path, Schema())
        assert "outcome" in str(err.value)

    def test_patient_subset(self):
        ds = from_frame(good_frame(), tv_cols=("x1",), static_cols=("x2",))
        sub = ds.patient_subset(["a"])
        assert sub.n_patients == 1
        assert set(sub.static.index) == {"a"}
