"""Sequential-trial expansion with artificial censoring at non-adherence.

Each eligible (patient, trial) pair contributes rows for trial visits
k = 0, 1, ... while the patient remains under follow-up, event-free and on
the treatment received at the trial baseline. The first visit at which the
observed treatment deviates from the baseline assignment emits no row.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import pandas as pd

from .datamodel import CENSORED, ID, OUTCOME, TREATMENT, VISIT, ObservationalDataset

TRIAL = "trial"
TRIAL_VISIT = "trial_visit"
ASSIGNED = "assigned"

EligibilityRule = Callable[[pd.DataFrame, int], bool]


@dataclass(frozen=True)
class ExpandedDataset:
    """Pooled person-trial-visit rows; baseline covariates repeated per block."""

    rows: pd.DataFrame
    n_trials: int
    tv_cols: tuple[str, ...]
    static_cols: tuple[str, ...]

    @property
    def enrollment(self) -> pd.Series:
        """Number of distinct patients enrolled per trial."""
        base = self.rows[self.rows[TRIAL_VISIT] == 0]
        return base.groupby(TRIAL)[ID].nunique()


def default_eligibility(patient: pd.DataFrame, m: int) -> bool:
    """Eligible at t_m iff under observation with no prior treatment or event."""
    visits = patient[VISIT].to_numpy()
    if m not in visits:
        return False
    before = patient[patient[VISIT] < m]
    return not (
        before[TREATMENT].any() or before[OUTCOME].any() or before[CENSORED].any()
    )


def eligibility(
    ds: ObservationalDataset, rule: EligibilityRule = default_eligibility
) -> pd.DataFrame:
    """Per-(patient, trial) eligibility indicators for every trial baseline."""
    pids: list = []
    trials: list = []
    flags: list = []
    fast = rule is default_eligibility
    for pid, grp in ds.visits.groupby(ID, sort=True):
        if fast:
            visits = grp[VISIT].to_numpy()
            a = grp[TREATMENT].to_numpy()
            y = grp[OUTCOME].to_numpy()
            c = grp[CENSORED].to_numpy()
            clean = np.cumsum(a + y + c) - (a + y + c) == 0  # no prior A/Y/C event
            present = np.zeros(ds.n_visits, dtype=bool)
            present[visits] = clean
            ok = present
        else:
            ok = np.array([rule(grp, m) for m in range(ds.n_visits)], dtype=bool)
        for m in range(ds.n_visits):
            pids.append(pid)
            trials.append(m)
            flags.append(int(ok[m]))
    return pd.DataFrame({ID: pids, TRIAL: trials, "eligible": flags})


def expand(ds: ObservationalDataset, elig: pd.DataFrame | None = None) -> ExpandedDataset:
    """Expand into the pooled sequential-trials dataset.

    Deterministic and independent of input row order: output is sorted by
    (patient, trial, trial visit).
    """
    if elig is None:
        elig = eligibility(ds)
    eligible = elig[elig["eligible"] == 1]
    elig_map: dict[object, list[int]] = {
        pid: sorted(grp[TRIAL].tolist()) for pid, grp in eligible.groupby(ID, sort=True)
    }

    tv = list(ds.tv_cols)
    static = list(ds.static_cols)
    out_pid: list = []
    out_trial: list[np.ndarray] = []
    out_k: list[np.ndarray] = []
    out_assigned: list[np.ndarray] = []
    out_y: list[np.ndarray] = []
    out_cov = {col: [] for col in tv + static}

    for pid, grp in ds.visits.groupby(ID, sort=True):
        trials = elig_map.get(pid)
        if not trials:
            continue
        visits = grp[VISIT].to_numpy()
        a = grp[TREATMENT].to_numpy()
        y = grp[OUTCOME].to_numpy()
        c = grp[CENSORED].to_numpy()
        tv_vals = {col: grp[col].to_numpy() for col in tv}
        static_vals = (
            {col: float(ds.static.loc[pid, col]) for col in static} if static else {}
        )
        first = int(visits[0])
        for m in trials:
            b = m - first  # index of the baseline visit within this patient's rows
            if b < 0 or b >= len(visits):
                continue
            assigned = int(a[b])
            n_rows = 0
            for k in range(len(visits) - b):
                if a[b + k] != assigned:
                    break  # artificial censoring: deviation visit emits no row
                n_rows = k + 1
                if y[b + k] == 1 or c[b + k] == 1:
                    break
            if n_rows == 0:
                continue
            out_pid.extend([pid] * n_rows)
            out_trial.append(np.full(n_rows, m))
            out_k.append(np.arange(n_rows))
            out_assigned.append(np.full(n_rows, assigned))
            out_y.append(y[b : b + n_rows])
            for col in tv:
                out_cov[col].append(np.full(n_rows, tv_vals[col][b]))
            for col in static:
                out_cov[col].append(np.full(n_rows, static_vals[col]))

    if out_pid:
        rows = pd.DataFrame(
            {
                ID: out_pid,
                TRIAL: np.concatenate(out_trial),
                TRIAL_VISIT: np.concatenate(out_k),
                ASSIGNED: np.concatenate(out_assigned),
                OUTCOME: np.concatenate(out_y),
            }
        )
        for col in tv + static:
            rows[col] = np.concatenate(out_cov[col])
        rows = rows.sort_values([ID, TRIAL, TRIAL_VISIT], kind="mergesort").reset_index(
            drop=True
        )
    else:
        cols = [ID, TRIAL, TRIAL_VISIT, ASSIGNED, OUTCOME] + tv + static
        rows = pd.DataFrame({c: [] for c in cols})
    return ExpandedDataset(
        rows=rows,
        n_trials=ds.n_visits,
        tv_cols=ds.tv_cols,
        static_cols=ds.static_cols,
    )


def tabulate(ex: ExpandedDataset) -> pd.DataFrame:
    """Row counts by (trial, arm, trial visit, outcome)."""
    if ex.rows.empty:
        return pd.DataFrame(columns=[TRIAL, ASSIGNED, TRIAL_VISIT, OUTCOME, "count"])
    out = (
        ex.rows.groupby([TRIAL, ASSIGNED, TRIAL_VISIT, OUTCOME])
        .size()
        .rename("count")
        .reset_index()
    )
    return out
