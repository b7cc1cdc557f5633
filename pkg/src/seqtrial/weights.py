"""Stabilised inverse-probability weights for treatment switching and censoring.

Treatment and censoring models are fitted once, on the original observational
data, stratified by the treatment received at the previous visit. Each
patient's person-visits are used up to their first post-baseline treatment
switch and de-duplicated across trials. For an expanded trial row the
adherent treatment history coincides with the observed one, so the weight at
trial visit k is a window product of per-visit numerator/denominator
probability ratios evaluated on the observational timeline.

Covariate tokens: a plain name refers to the current-visit value of a
time-varying column or to a static column; ``lag1:name`` / ``lag2:name``
refer to the value one / two visits earlier. In numerator models a
time-varying name refers to the trial-baseline value instead.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy.special import expit

from .datamodel import CENSORED, ID, OUTCOME, TREATMENT, VISIT, ObservationalDataset
from . import glm
from .expansion import ASSIGNED, TRIAL, TRIAL_VISIT, ExpandedDataset

MIN_DENOMINATOR = 1e-12


@dataclass(frozen=True)
class WeightModelSpec:
    denominator_covariates: tuple[str, ...] = ()
    numerator_covariates: tuple[str, ...] = ()
    stratify_by_prev_treatment: bool = True
    censoring: bool = True
    truncate_percentiles: tuple[float, float] | None = None


@dataclass
class ProbModel:
    """A fitted per-stratum probability model, possibly degenerate."""

    kind: str  # "logistic" | "constant"
    fit: glm.LogisticFit | None = None
    constant: float | None = None
    note: str | None = None
    # fitting rows, kept for score-based bootstrap updates
    x: np.ndarray | None = None
    y: np.ndarray | None = None
    pid_codes: np.ndarray | None = None

    def prob(self, x: np.ndarray, beta=None) -> np.ndarray:
        if self.kind == "constant":
            return np.full(x.shape[0], self.constant)
        if isinstance(beta, float):  # replicate collapsed to a constant response
            return np.full(x.shape[0], beta)
        b = self.fit.beta if beta is None else beta
        return expit(x @ b)


@dataclass
class TermTable:
    """Per person-visit quantities shared by model fitting and weight lookup."""

    pid_codes: np.ndarray
    visit: np.ndarray
    stratum: np.ndarray
    response: np.ndarray  # A_v for treatment rows, 1 - C_v for censoring rows
    in_fit: np.ndarray
    x_den: np.ndarray
    x_num: np.ndarray


@dataclass
class WeightModels:
    spec: WeightModelSpec
    patients: np.ndarray
    n_visits: int
    treatment_den: dict[int, ProbModel]
    treatment_num: dict[int, ProbModel]
    censor_den: dict[int, ProbModel] | None
    censor_num: dict[int, ProbModel] | None
    treat_terms: TermTable
    censor_terms: TermTable | None
    notes: tuple[str, ...] = ()

    def all_models(self):
        """(label, stratum, model) triples for every fitted logistic model."""
        groups = [
            ("treatment_den", self.treatment_den),
            ("treatment_num", self.treatment_num),
            ("censor_den", self.censor_den),
            ("censor_num", self.censor_num),
        ]
        for label, grp in groups:
            if grp is None:
                continue
            for stratum, model in sorted(grp.items()):
                yield label, stratum, model


@dataclass
class WeightDiagnostics:
    n_excluded_rows: int = 0
    notes: tuple[str, ...] = ()


@dataclass
class WeightedExpansion:
    expansion: ExpandedDataset
    rows: pd.DataFrame  # expansion rows + sw_a, sw_c, sw columns
    diagnostics: WeightDiagnostics


def _parse_token(token: str) -> tuple[str, int]:
    if token.startswith("lag1:"):
        return token[5:], 1
    if token.startswith("lag2:"):
        return token[5:], 2
    return token, 0


def _covariate_matrix(
    grp_arrays: dict[str, np.ndarray],
    static_vals: dict[str, float],
    tokens: tuple[str, ...],
    n: int,
) -> np.ndarray:
    """Design columns (no intercept) for one patient's person-visit rows."""
    cols = []
    for token in tokens:
        name, lag = _parse_token(token)
        if name in static_vals:
            cols.append(np.full(n, static_vals[name]))
        else:
            vals = grp_arrays[name]
            if lag == 0:
                cols.append(vals[:n].astype(float))
            else:
                shifted = np.full(n, np.nan)
                shifted[lag:] = vals[: n - lag]
                cols.append(shifted)
    if not cols:
        return np.empty((n, 0))
    return np.column_stack(cols)


def _baseline_numerator_row(
    grp_arrays: dict[str, np.ndarray],
    static_vals: dict[str, float],
    tokens: tuple[str, ...],
) -> np.ndarray:
    """Numerator covariates at the patient's earliest trial baseline."""
    vals = []
    for token in tokens:
        name, _ = _parse_token(token)
        if name in static_vals:
            vals.append(static_vals[name])
        else:
            vals.append(float(grp_arrays[name][0]))
    return np.array(vals)


def _fit_stratified(
    terms: TermTable,
    x_getter,
    strata: tuple[int, ...],
    notes: list[str],
    label: str,
) -> dict[int, ProbModel]:
    out: dict[int, ProbModel] = {}
    for s in strata:
        mask = terms.in_fit & (terms.stratum == s)
        y = terms.response[mask]
        x = x_getter(mask)
        pid = terms.pid_codes[mask]
        if y.size == 0:
            out[s] = ProbModel(kind="constant", constant=1.0, note="empty stratum")
            notes.append(f"{label} stratum {s}: no fitting rows")
        elif np.all(y == y[0]):
            out[s] = ProbModel(
                kind="constant", constant=float(y[0]), note="constant response"
            )
            notes.append(f"{label} stratum {s}: degenerate (all responses {y[0]})")
        else:
            fit = glm.fit_weighted_logistic(x, y, np.ones(y.size))
            out[s] = ProbModel(kind="logistic", fit=fit, x=x, y=y, pid_codes=pid)
    return out


def _build_term_tables(
    ds: ObservationalDataset, spec: WeightModelSpec
) -> tuple[np.ndarray, TermTable, TermTable | None, bool]:
    patients = np.array(sorted(ds.visits[ID].unique(), key=str))
    pid_index = {p: i for i, p in enumerate(patients)}
    den_tokens = spec.denominator_covariates
    num_tokens = spec.numerator_covariates

    t_rows: dict[str, list] = {k: [] for k in ("pid", "v", "s", "y", "fit")}
    t_xden: list[np.ndarray] = []
    t_xnum: list[np.ndarray] = []
    c_rows: dict[str, list] = {k: [] for k in ("pid", "v", "s", "y", "fit")}
    c_xden: list[np.ndarray] = []
    c_xnum: list[np.ndarray] = []
    any_censoring = False

    for pid, grp in ds.visits.groupby(ID, sort=False):
        code = pid_index[pid]
        visits = grp[VISIT].to_numpy()
        a = grp[TREATMENT].to_numpy()
        y = grp[OUTCOME].to_numpy()
        c = grp[CENSORED].to_numpy()
        n = len(visits)
        grp_arrays = {col: grp[col].to_numpy() for col in ds.tv_cols}
        static_vals = (
            {col: float(ds.static.loc[pid, col]) for col in ds.static_cols}
            if ds.static_cols
            else {}
        )
        if c.any():
            any_censoring = True

        # first post-baseline treatment switch (the visit itself is retained)
        treated = np.flatnonzero(a == 1)
        cutoff = n - 1
        if treated.size:
            ft = treated[0]
            off = np.flatnonzero(a[ft + 1 :] == 0)
            if off.size:
                cutoff = ft + 1 + off[0]

        xden_all = _covariate_matrix(grp_arrays, static_vals, den_tokens, n)
        xnum_base = _baseline_numerator_row(grp_arrays, static_vals, num_tokens)

        for r in range(1, n):
            t_rows["pid"].append(code)
            t_rows["v"].append(int(visits[r]))
            t_rows["s"].append(int(a[r - 1]))
            t_rows["y"].append(int(a[r]))
            t_rows["fit"].append(r <= cutoff)
            t_xden.append(xden_all[r])
            t_xnum.append(xnum_base)
        for r in range(n):
            c_rows["pid"].append(code)
            c_rows["v"].append(int(visits[r]))
            c_rows["s"].append(int(a[r - 1]) if r > 0 else 0)
            c_rows["y"].append(1 - int(c[r]))
            c_rows["fit"].append(r <= cutoff and y[r] == 0)
            c_xden.append(xden_all[r])
            c_xnum.append(xnum_base)

    def table(rows, xden, xnum) -> TermTable:
        n = len(rows["pid"])
        return TermTable(
            pid_codes=np.array(rows["pid"], dtype=int),
            visit=np.array(rows["v"], dtype=int),
            stratum=np.array(rows["s"], dtype=int),
            response=np.array(rows["y"], dtype=int),
            in_fit=np.array(rows["fit"], dtype=bool),
            x_den=np.vstack(xden) if n else np.empty((0, len(den_tokens))),
            x_num=np.vstack(xnum) if n else np.empty((0, len(num_tokens))),
        )

    treat_terms = table(t_rows, t_xden, t_xnum)
    censor_terms = table(c_rows, c_xden, c_xnum) if spec.censoring else None
    return patients, treat_terms, censor_terms, any_censoring


def _with_intercept(x: np.ndarray) -> np.ndarray:
    return np.column_stack([np.ones(x.shape[0]), x])


def fit_weight_models(ds: ObservationalDataset, spec: WeightModelSpec) -> WeightModels:
    """Fit stratified treatment (and censoring) models on the original data."""
    patients, treat_terms, censor_terms, any_censoring = _build_term_tables(ds, spec)
    notes: list[str] = []
    strata = (0, 1) if spec.stratify_by_prev_treatment else (0,)
    if not spec.stratify_by_prev_treatment:
        treat_terms.stratum[:] = 0
        if censor_terms is not None:
            censor_terms.stratum[:] = 0

    lag_ok = np.all(np.isfinite(treat_terms.x_den), axis=1)
    treat_terms.in_fit &= lag_ok

    t_den = _fit_stratified(
        treat_terms,
        lambda m: _with_intercept(treat_terms.x_den[m]),
        strata,
        notes,
        "treatment denominator",
    )
    t_num = _fit_stratified(
        treat_terms,
        lambda m: _with_intercept(treat_terms.x_num[m]),
        strata,
        notes,
        "treatment numerator",
    )

    c_den = c_num = None
    if spec.censoring and censor_terms is not None:
        lag_ok_c = np.all(np.isfinite(censor_terms.x_den), axis=1)
        censor_terms.in_fit &= lag_ok_c
        c_den = _fit_stratified(
            censor_terms,
            lambda m: _with_intercept(censor_terms.x_den[m]),
            strata,
            notes,
            "censoring denominator",
        )
        c_num = _fit_stratified(
            censor_terms,
            lambda m: _with_intercept(censor_terms.x_num[m]),
            strata,
            notes,
            "censoring numerator",
        )

    return WeightModels(
        spec=spec,
        patients=patients,
        n_visits=ds.n_visits,
        treatment_den=t_den,
        treatment_num=t_num,
        censor_den=c_den,
        censor_num=c_num,
        treat_terms=treat_terms,
        censor_terms=censor_terms,
        notes=tuple(notes),
    )


def _observed_prob(
    models: dict[int, ProbModel],
    terms: TermTable,
    x: np.ndarray,
    betas: dict[int, np.ndarray] | None = None,
) -> np.ndarray:
    """Probability of the observed response for each term row."""
    p1 = np.empty(terms.response.size)
    for s, model in models.items():
        mask = terms.stratum == s
        if not mask.any():
            continue
        beta = None if betas is None else betas.get(s)
        p1[mask] = model.prob(_with_intercept(x[mask]), beta)
    return np.where(terms.response == 1, p1, 1.0 - p1)


def _log_term_cums(
    terms: TermTable,
    num_p: np.ndarray,
    den_p: np.ndarray,
    n_patients: int,
    n_visits: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-patient cumulative log(num/den) terms over visits.

    Returns (cum, bad_cum), both of shape (n_patients, n_visits + 1) with a
    leading zero column, so a sum over visits u..v is cum[:, v+1] - cum[:, u].
    bad_cum counts terms with an underflowing denominator or unresolvable
    covariates; invalid terms contribute zero to cum and are flagged instead.
    """
    grid = np.full((n_patients, n_visits), np.nan)
    with np.errstate(divide="ignore", invalid="ignore"):
        vals = np.log(num_p) - np.log(den_p)
    vals = np.where(den_p > MIN_DENOMINATOR, vals, np.nan)
    grid[terms.pid_codes, terms.visit] = vals
    present = np.zeros((n_patients, n_visits), dtype=bool)
    present[terms.pid_codes, terms.visit] = True
    bad = present & ~np.isfinite(grid)
    filled = np.where(np.isfinite(grid), grid, 0.0)
    cum = np.concatenate(
        [np.zeros((n_patients, 1)), np.cumsum(filled, axis=1)], axis=1
    )
    bad_cum = np.concatenate(
        [np.zeros((n_patients, 1), dtype=int), np.cumsum(bad, axis=1)], axis=1
    )
    return cum, bad_cum


def weight_values(
    models: WeightModels,
    codes: np.ndarray,
    m_arr: np.ndarray,
    k_arr: np.ndarray,
    *,
    treat_betas: dict[int, np.ndarray] | None = None,
    censor_betas: dict[int, np.ndarray] | None = None,
    num_treat_betas: dict[int, np.ndarray] | None = None,
    num_censor_betas: dict[int, np.ndarray] | None = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Array-level weight computation: (sw_a, sw_c, bad) per expanded row.

    `codes` indexes rows into models.patients; the optional beta overrides
    evaluate the same models at different coefficients (used by score-based
    bootstrap updates).
    """
    n_pat = models.patients.size
    n_vis = models.n_visits
    tt = models.treat_terms
    den_p = _observed_prob(models.treatment_den, tt, tt.x_den, treat_betas)
    num_p = _observed_prob(models.treatment_num, tt, tt.x_num, num_treat_betas)
    cum, bad_cum = _log_term_cums(tt, num_p, den_p, n_pat, n_vis)
    # window over visits m+1 .. m+k
    log_sw_a = cum[codes, m_arr + k_arr + 1] - cum[codes, m_arr + 1]
    bad_a = (bad_cum[codes, m_arr + k_arr + 1] - bad_cum[codes, m_arr + 1]) > 0
    sw_a = np.exp(log_sw_a)
    sw_a[k_arr == 0] = 1.0
    bad_a[k_arr == 0] = False

    if models.censor_den is not None and models.censor_terms is not None:
        ct = models.censor_terms
        den_pc = _observed_prob(models.censor_den, ct, ct.x_den, censor_betas)
        num_pc = _observed_prob(models.censor_num, ct, ct.x_num, num_censor_betas)
        # the term at visit v is the probability of remaining uncensored in
        # [t_v, t_{v+1}); the window for trial visit k covers visits m .. m+k-1
        cumc, bad_cumc = _log_term_cums(ct, num_pc, den_pc, n_pat, n_vis)
        log_sw_c = cumc[codes, m_arr + k_arr] - cumc[codes, m_arr]
        bad_c = (bad_cumc[codes, m_arr + k_arr] - bad_cumc[codes, m_arr]) > 0
        sw_c = np.exp(log_sw_c)
        sw_c[k_arr == 0] = 1.0
        bad_c[k_arr == 0] = False
    else:
        sw_c = np.ones(codes.size)
        bad_c = np.zeros(codes.size, dtype=bool)

    bad = bad_a | bad_c | ~np.isfinite(sw_a) | ~np.isfinite(sw_c)
    return sw_a, sw_c, bad


def patient_codes(models: WeightModels, ids: np.ndarray) -> np.ndarray:
    pid_index = {p: i for i, p in enumerate(models.patients)}
    return np.array([pid_index[p] for p in ids], dtype=int)


def compute_weights(ex: ExpandedDataset, models: WeightModels) -> WeightedExpansion:
    """Fill stabilised treatment/censoring weights for every expanded row."""
    rows = ex.rows.copy()
    codes = patient_codes(models, rows[ID].to_numpy())
    m_arr = rows[TRIAL].to_numpy(dtype=int)
    k_arr = rows[TRIAL_VISIT].to_numpy(dtype=int)
    sw_a, sw_c, bad = weight_values(models, codes, m_arr, k_arr)
    rows["sw_a"] = sw_a
    rows["sw_c"] = sw_c
    rows["sw"] = sw_a * sw_c
    n_excluded = int(bad.sum())
    if n_excluded:
        rows = rows[~bad].reset_index(drop=True)

    notes = []
    if models.spec.truncate_percentiles is not None and len(rows):
        lo, hi = models.spec.truncate_percentiles
        lo_v, hi_v = np.percentile(rows["sw"], [lo, hi])
        rows["sw"] = rows["sw"].clip(lo_v, hi_v)
        notes.append(f"weights truncated to [{lo}, {hi}] percentiles")

    return WeightedExpansion(
        expansion=ex,
        rows=rows,
        diagnostics=WeightDiagnostics(
            n_excluded_rows=n_excluded, notes=tuple(notes)
        ),
    )


def weight_summary(wx: WeightedExpansion) -> pd.DataFrame:
    """Summary statistics of the k >= 1 weights, one row per weight kind."""
    mask = wx.rows[TRIAL_VISIT] >= 1
    records = []
    for kind in ("sw_a", "sw_c", "sw"):
        vals = wx.rows.loc[mask, kind].to_numpy()
        if vals.size == 0:
            records.append({"weight": kind, "n": 0})
            continue
        records.append(
            {
                "weight": kind,
                "n": int(vals.size),
                "mean": float(np.mean(vals)),
                "sd": float(np.std(vals, ddof=1)) if vals.size > 1 else 0.0,
                "min": float(np.min(vals)),
                "max": float(np.max(vals)),
                "p1": float(np.percentile(vals, 1)),
                "p99": float(np.percentile(vals, 99)),
            }
        )
    return pd.DataFrame(records)
