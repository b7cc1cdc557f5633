"""Trial expansion against a fully hand-enumerated three-patient oracle."""

import numpy as np
import pandas as pd

from seqtrial.datamodel import CENSORED, ID, OUTCOME, TREATMENT, VISIT, from_frame
from seqtrial.expansion import ASSIGNED, TRIAL, TRIAL_VISIT, eligibility, expand, tabulate


def fixture():
    """Three patients covering deviation, an event and censoring.

    a: visits 0-4, treatment (0,0,1,1,1), no event.
    b: visits 0-2, untreated, event at visit 2.
    c: visits 0-3, treatment (1,1,0,1), censored at visit 3.
    """
    rows = []
    for v, a in enumerate([0, 0, 1, 1, 1]):
        rows.append(("a", v, a, 0, 0, 10.0 + v))
    for v, y in enumerate([0, 0, 1]):
        rows.append(("b", v, 0, y, 0, 20.0 + v))
    for v, (a, c) in enumerate(zip([1, 1, 0, 1], [0, 0, 0, 1])):
        rows.append(("c", v, a, 0, c, 30.0 + v))
    f = pd.DataFrame(rows, columns=[ID, VISIT, TREATMENT, OUTCOME, CENSORED, "x"])
    return from_frame(f, tv_cols=("x",), static_cols=(), n_visits=5)


# hand enumeration:
#   a: eligible trials 0,1,2 (first treated at visit 2)
#      trial 0 assigned 0 -> visits 0,1 (visit 2 deviates, no row)   2 rows
#      trial 1 assigned 0 -> visit 1                                  1 row
#      trial 2 assigned 1 -> visits 2,3,4                             3 rows
#   b: eligible trials 0,1,2 (event row itself still enrols trial 2)
#      trial 0 assigned 0 -> visits 0,1,2 (event row kept)            3 rows
#      trial 1 assigned 0 -> visits 1,2                                2 rows
#      trial 2 assigned 0 -> visit 2                                   1 row
#   c: eligible trial 0 only (treated from visit 0)
#      trial 0 assigned 1 -> visits 0,1 (visit 2 deviates)            2 rows
EXPECTED = [
    # (patient, trial, trial_visit, assigned, outcome, baseline x)
    ("a", 0, 0, 0, 0, 10.0),
    ("a", 0, 1, 0, 0, 10.0),
    ("a", 1, 0, 0, 0, 11.0),
    ("a", 2, 0, 1, 0, 12.0),
    ("a", 2, 1, 1, 0, 12.0),
    ("a", 2, 2, 1, 0, 12.0),
    ("b", 0, 0, 0, 0, 20.0),
    ("b", 0, 1, 0, 0, 20.0),
    ("b", 0, 2, 0, 1, 20.0),
    ("b", 1, 0, 0, 0, 21.0),
    ("b", 1, 1, 0, 1, 21.0),
    ("b", 2, 0, 0, 1, 22.0),
    ("c", 0, 0, 1, 0, 30.0),
    ("c", 0, 1, 1, 0, 30.0),
]


class TestEligibility:
    def test_hand_enumerated_flags(self):
        ds = fixture()
        el = eligibility(ds)
        flags = {
            (r[ID], r[TRIAL]): r["eligible"] for _, r in el.iterrows()
        }
        assert [flags[("a", m)] for m in range(5)] == [1, 1, 1, 0, 0]
        assert [flags[("b", m)] for m in range(5)] == [1, 1, 1, 0, 0]
        assert [flags[("c", m)] for m in range(5)] == [1, 0, 0, 0, 0]

    def test_custom_rule_matches_default(self):
        # the vectorised fast path must agree with a plain per-trial rule
        from seqtrial.expansion import default_eligibility

        ds = fixture()
        fast = eligibility(ds)
        slow = eligibility(ds, rule=lambda patient, m: default_eligibility(patient, m))
        pd.testing.assert_frame_equal(fast, slow)


class TestExpand:
    def test_hand_enumerated_rows(self):
        ds = fixture()
        ex = expand(ds)
        got = list(
            ex.rows[[ID, TRIAL, TRIAL_VISIT, ASSIGNED, OUTCOME, "x"]].itertuples(
                index=False, name=None
            )
        )
        assert got == EXPECTED

    def test_enrollment_counts(self):
        ex = expand(fixture())
        assert ex.enrollment.to_dict() == {0: 3, 1: 2, 2: 2}

    def test_baseline_covariates_frozen_within_block(self):
        ex = expand(fixture())
        block = ex.rows[(ex.rows[ID] == "a") & (ex.rows[TRIAL] == 2)]
        assert set(block["x"]) == {12.0}

    def test_input_order_invariance(self):
        ds = fixture()
        shuffled = from_frame(
            ds.visits.sample(frac=1.0, random_state=1),
            tv_cols=("x",), static_cols=(), n_visits=5,
        )
        pd.testing.assert_frame_equal(expand(ds).rows, expand(shuffled).rows)

    def test_tabulate_counts(self):
        tab = tabulate(expand(fixture()))
        total = tab["count"].sum()
        assert total == len(EXPECTED)
        row = tab[
            (tab[TRIAL] == 0) & (tab[ASSIGNED] == 0)
            & (tab[TRIAL_VISIT] == 2) & (tab[OUTCOME] == 1)
        ]
        assert row["count"].item() == 1
