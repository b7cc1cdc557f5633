"""Long-format longitudinal dataset: ingestion, validation, round-trip I/O.

One CSV row per patient-visit. Visit indices must be consecutive integers
per patient, the outcome is absorbing and censoring is terminal. Static
covariates are carried on every row and collected per patient.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd

ID = "patient_id"
VISIT = "visit"
TREATMENT = "treatment"
OUTCOME = "outcome"
CENSORED = "censored"


class SchemaError(ValueError):
    """A required column is missing or the schema is inconsistent."""


class ValueDomainError(ValueError):
    """A cell value falls outside its allowed domain."""


class StructureError(ValueError):
    """The per-patient visit structure is invalid."""


@dataclass(frozen=True)
class Schema:
    """Maps raw CSV column names onto the canonical dataset columns."""

    id: str = "id"
    visit: str = "visit"
    treatment: str = "treatment"
    outcome: str = "outcome"
    censor: str | None = "censored"
    tv_covariates: tuple[str, ...] = ()
    static_covariates: tuple[str, ...] = ()
    delimiter: str = ","


@dataclass(frozen=True)
class Finding:
    patient_id: object
    visit: int | None
    message: str


@dataclass(frozen=True)
class ValidationReport:
    findings: tuple[Finding, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.findings


@dataclass(frozen=True)
class ObservationalDataset:
    """Immutable long-format visit table plus per-patient static covariates."""

    visits: pd.DataFrame
    static: pd.DataFrame  # indexed by patient id
    n_visits: int
    tv_cols: tuple[str, ...]
    static_cols: tuple[str, ...]

    @property
    def patients(self) -> np.ndarray:
        return self.visits[ID].unique()

    @property
    def n_patients(self) -> int:
        return int(self.visits[ID].nunique())

    def patient_subset(self, keep_ids) -> "ObservationalDataset":
        mask = self.visits[ID].isin(set(keep_ids))
        return replace(
            self,
            visits=self.visits[mask].reset_index(drop=True),
            static=self.static.loc[self.static.index.isin(set(keep_ids))],
        )


def _check_binary(frame: pd.DataFrame, col: str) -> None:
    vals = frame[col]
    bad = ~vals.isin([0, 1])
    if bad.any():
        row = frame.index[bad][0]
        raise ValueDomainError(
            f"column '{col}' must be 0/1; found {vals[row]!r} at row {row}"
        )


def from_frame(
    frame: pd.DataFrame,
    *,
    tv_cols: tuple[str, ...],
    static_cols: tuple[str, ...],
    n_visits: int | None = None,
    check: bool = True,
) -> ObservationalDataset:
    """Build a dataset from a canonical-column frame, optionally validating."""
    frame = frame.sort_values([ID, VISIT], kind="mergesort").reset_index(drop=True)
    if frame[list(tv_cols) + list(static_cols)].isna().any().any():
        raise ValueDomainError("missing covariate values are not allowed")
    if n_visits is None:
        n_visits = int(frame[VISIT].max()) + 1 if len(frame) else 0
    static = frame.groupby(ID, sort=True)[list(static_cols)].first()
    ds = ObservationalDataset(
        visits=frame,
        static=static,
        n_visits=n_visits,
        tv_cols=tuple(tv_cols),
        static_cols=tuple(static_cols),
    )
    if check:
        for c in (TREATMENT, OUTCOME, CENSORED):
            _check_binary(frame, c)
        report = validate(ds)
        if not report.ok:
            f = report.findings[0]
            raise StructureError(
                f"invalid structure for patient {f.patient_id!r}"
                + (f" at visit {f.visit}" if f.visit is not None else "")
                + f": {f.message}"
            )
    return ds


def load_csv(path, schema: Schema, check: bool = True) -> ObservationalDataset:
    """Read a long-format CSV and validate all structural invariants."""
    raw = pd.read_csv(path, sep=schema.delimiter)
    required = [schema.id, schema.visit, schema.treatment, schema.outcome]
    if schema.censor is not None:
        required.append(schema.censor)
    required += list(schema.tv_covariates) + list(schema.static_covariates)
    missing = [c for c in required if c not in raw.columns]
    if missing:
        raise SchemaError(f"missing column(s) in {path}: {', '.join(missing)}")

    frame = pd.DataFrame(
        {
            ID: raw[schema.id],
            VISIT: raw[schema.visit],
            TREATMENT: raw[schema.treatment],
            OUTCOME: raw[schema.outcome],
            CENSORED: raw[schema.censor] if schema.censor is not None else 0,
        }
    )
    for c in schema.tv_covariates:
        frame[c] = raw[c].astype(float)
    for c in schema.static_covariates:
        frame[c] = raw[c].astype(float)
    if not np.issubdtype(frame[VISIT].dtype, np.integer):
        as_float = frame[VISIT].astype(float)
        if not np.all(as_float == np.floor(as_float)):
            raise ValueDomainError("visit indices must be integers")
        frame[VISIT] = as_float.astype(int)
    return from_frame(
        frame,
        tv_cols=schema.tv_covariates,
        static_cols=schema.static_covariates,
        check=check,
    )


def write_csv(ds: ObservationalDataset, path, schema: Schema | None = None) -> None:
    """Write the canonical sorted long format; inverse of load_csv."""
    schema = schema or Schema(
        id=ID,
        visit=VISIT,
        treatment=TREATMENT,
        outcome=OUTCOME,
        censor=CENSORED,
        tv_covariates=ds.tv_cols,
        static_covariates=ds.static_cols,
    )
    out = pd.DataFrame(
        {
            schema.id: ds.visits[ID],
            schema.visit: ds.visits[VISIT],
            schema.treatment: ds.visits[TREATMENT],
            schema.outcome: ds.visits[OUTCOME],
        }
    )
    if schema.censor is not None:
        out[schema.censor] = ds.visits[CENSORED]
    for c in ds.tv_cols:
        out[c] = ds.visits[c]
    for c in ds.static_cols:
        out[c] = ds.visits[c]
    out.to_csv(path, sep=schema.delimiter, index=False)


def validate(ds: ObservationalDataset) -> ValidationReport:
    """Check every type invariant; findings are data, never exceptions."""
    findings: list[Finding] = []
    frame = ds.visits
    for col in (TREATMENT, OUTCOME, CENSORED):
        bad = ~frame[col].isin([0, 1])
        if bad.any():
            r = frame[bad].iloc[0]
            findings.append(
                Finding(r[ID], int(r[VISIT]), f"non-binary value in '{col}'")
            )
    for pid, grp in frame.groupby(ID, sort=True):
        visits = grp[VISIT].to_numpy()
        if len(visits) and not np.array_equal(
            visits, np.arange(visits[0], visits[0] + len(visits))
        ):
            findings.append(Finding(pid, None, "visit indices are not consecutive"))
            continue
        y = grp[OUTCOME].to_numpy()
        c = grp[CENSORED].to_numpy()
        if np.any(y[:-1] == 1):
            v = int(visits[np.argmax(y == 1)])
            findings.append(Finding(pid, v, "row present after outcome event"))
        if np.any(c[:-1] == 1):
            v = int(visits[np.argmax(c == 1)])
            findings.append(Finding(pid, v, "row present after censoring"))
        if np.any(visits >= ds.n_visits):
            findings.append(Finding(pid, int(visits[-1]), "visit index >= n_visits"))
        if pid not in ds.static.index:
            findings.append(Finding(pid, None, "no static-covariate record"))
    return ValidationReport(tuple(findings))
