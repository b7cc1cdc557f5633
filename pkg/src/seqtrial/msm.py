"""Marginal structural model fitting and marginal risk difference estimation.

The MSM is a pooled logistic model for the discrete-time hazard, fitted with
the stabilised weights and a patient-clustered sandwich variance. The risk
difference curve is obtained by empirical standardisation: counterfactual
survival products under always-treat and never-treat, averaged over the
target trial's enrolled patients.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pandas as pd
from scipy.special import expit

from . import glm
from .datamodel import ID, OUTCOME
from .expansion import ASSIGNED, TRIAL, TRIAL_VISIT
from .weights import WeightedExpansion


class MsmSpecError(ValueError):
    """A model term references an unknown covariate."""


@dataclass(frozen=True)
class MsmSpec:
    """Design specification for the pooled hazard model.

    `baseline_covariates` entries are column names, optionally suffixed with
    ``:by_visit`` to interact the covariate with trial-visit indicators.
    """

    visit_term: str = "factor"  # factor | linear
    trial_term: str = "none"  # none | factor | linear
    treatment_term: str = "by_visit"  # constant | by_visit
    baseline_covariates: tuple[str, ...] = ()
    extra_interactions: tuple[tuple[str, str], ...] = ()


def _parse_covariates(spec: MsmSpec) -> list[tuple[str, bool]]:
    out = []
    for entry in spec.baseline_covariates:
        if entry.endswith(":by_visit"):
            out.append((entry[: -len(":by_visit")], True))
        else:
            out.append((entry, False))
    return out


class DesignBuilder:
    """Maps trial rows to MSM design matrices with a frozen column legend.

    Levels for factor terms are fixed when the builder is created from the
    training expansion, so bootstrap and counterfactual rows produce
    column-compatible matrices.
    """

    def __init__(self, spec: MsmSpec, visit_levels, trial_levels, covariates):
        self.spec = spec
        self.visit_levels = tuple(int(v) for v in visit_levels)
        self.trial_levels = tuple(int(m) for m in trial_levels)
        self.covariates = tuple(covariates)
        names: list[str] = []
        if spec.visit_term == "linear":
            names.append("intercept")
            names.append("visit")
        elif spec.visit_term == "factor":
            names.extend(f"visit_{k}" for k in self.visit_levels)
        else:
            raise MsmSpecError(f"unknown visit_term {spec.visit_term!r}")
        if spec.trial_term == "linear":
            names.append("trial")
        elif spec.trial_term == "factor":
            names.extend(f"trial_{m}" for m in self.trial_levels[1:])
        elif spec.trial_term != "none":
            raise MsmSpecError(f"unknown trial_term {spec.trial_term!r}")
        if spec.treatment_term == "constant":
            names.append("treat")
        elif spec.treatment_term == "by_visit":
            names.extend(f"treat_x_visit_{k}" for k in self.visit_levels)
        else:
            raise MsmSpecError(f"unknown treatment_term {spec.treatment_term!r}")
        for name, by_visit in self.covariates:
            if by_visit:
                names.extend(f"{name}_x_visit_{k}" for k in self.visit_levels)
            else:
                names.append(name)
        for a, b in spec.extra_interactions:
            names.append(f"{a}_x_{b}")
        self.column_names = tuple(names)

    @classmethod
    def from_expansion(cls, rows: pd.DataFrame, spec: MsmSpec, covariate_cols):
        for name, _ in _parse_covariates(spec):
            if name not in covariate_cols:
                raise MsmSpecError(f"unknown MSM covariate {name!r}")
        for a, b in spec.extra_interactions:
            for c in (a, b):
                if c not in list(covariate_cols) + [ASSIGNED]:
                    raise MsmSpecError(f"unknown interaction term {c!r}")
        return cls(
            spec,
            sorted(rows[TRIAL_VISIT].unique()),
            sorted(rows[TRIAL].unique()),
            _parse_covariates(spec),
        )

    @property
    def n_columns(self) -> int:
        return len(self.column_names)

    def matrix(self, rows: pd.DataFrame) -> np.ndarray:
        n = len(rows)
        visit = rows[TRIAL_VISIT].to_numpy(dtype=float)
        trial = rows[TRIAL].to_numpy(dtype=float)
        treat = rows[ASSIGNED].to_numpy(dtype=float)
        cols: list[np.ndarray] = []
        spec = self.spec
        if spec.visit_term == "linear":
            cols.append(np.ones(n))
            cols.append(visit)
        else:
            for k in self.visit_levels:
                cols.append((visit == k).astype(float))
        if spec.trial_term == "linear":
            cols.append(trial)
        elif spec.trial_term == "factor":
            for m in self.trial_levels[1:]:
                cols.append((trial == m).astype(float))
        if spec.treatment_term == "constant":
            cols.append(treat)
        else:
            for k in self.visit_levels:
                cols.append(treat * (visit == k))
        for name, by_visit in self.covariates:
            vals = rows[name].to_numpy(dtype=float)
            if by_visit:
                for k in self.visit_levels:
                    cols.append(vals * (visit == k))
            else:
                cols.append(vals)
        for a, b in spec.extra_interactions:
            va = treat if a == ASSIGNED else rows[a].to_numpy(dtype=float)
            vb = treat if b == ASSIGNED else rows[b].to_numpy(dtype=float)
            cols.append(va * vb)
        return np.column_stack(cols) if cols else np.empty((n, 0))


@dataclass
class MsmFit:
    fit: glm.LogisticFit
    sandwich: np.ndarray | glm.ConstructionFailure
    builder: DesignBuilder
    n_clusters: int

    @property
    def beta(self) -> np.ndarray:
        return self.fit.beta

    @property
    def column_names(self) -> tuple[str, ...]:
        return self.builder.column_names


@dataclass
class MrdCurve:
    trial: int
    visits: np.ndarray
    values: np.ndarray
    n_target: int

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {"trial": self.trial, "visit": self.visits, "mrd": self.values}
        )


def build_design(
    wx: WeightedExpansion, spec: MsmSpec
) -> tuple[DesignBuilder, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Design matrix, response, weights and cluster ids for the MSM fit."""
    rows = wx.rows
    covariate_cols = list(wx.expansion.tv_cols) + list(wx.expansion.static_cols)
    builder = DesignBuilder.from_expansion(rows, spec, covariate_cols)
    x = builder.matrix(rows)
    y = rows[OUTCOME].to_numpy(dtype=float)
    w = rows["sw"].to_numpy(dtype=float)
    clusters = rows[ID].to_numpy()
    return builder, x, y, w, clusters


def fit_msm(wx: WeightedExpansion, spec: MsmSpec, **fit_opts) -> MsmFit:
    """Weighted pooled logistic fit with patient-clustered sandwich variance."""
    builder, x, y, w, clusters = build_design(wx, spec)
    fit = glm.fit_weighted_logistic(x, y, w, **fit_opts)
    sandwich = glm.sandwich_vcov(fit, x, y, w, clusters)
    return MsmFit(
        fit=fit,
        sandwich=sandwich,
        builder=builder,
        n_clusters=int(pd.unique(clusters).shape[0]),
    )


class MrdEvaluator:
    """Standardised risk-difference curves as a fast function of beta.

    Counterfactual designs for both arms are precomputed over the target
    trial's enrolled patients, so repeated evaluation (bootstrap replicates,
    multivariate-normal draws) is a matrix product per arm.
    """

    def __init__(self, wx: WeightedExpansion, builder: DesignBuilder, target_trial: int):
        rows = wx.expansion.rows
        base = rows[(rows[TRIAL] == target_trial) & (rows[TRIAL_VISIT] == 0)]
        if base.empty:
            raise ValueError(f"no patients enrolled in trial {target_trial}")
        base = base.sort_values(ID, kind="mergesort").reset_index(drop=True)
        self.trial = int(target_trial)
        self.patient_ids = base[ID].to_numpy()
        self.n_target = len(base)
        max_visit = wx.expansion.n_trials - target_trial - 1
        self.visits = np.arange(max_visit + 1)
        n_k = self.visits.size

        covariate_cols = [
            c
            for c in list(wx.expansion.tv_cols) + list(wx.expansion.static_cols)
            if c in base.columns
        ]
        rep = base.loc[base.index.repeat(n_k)].reset_index(drop=True)
        rep[TRIAL_VISIT] = np.tile(self.visits, self.n_target)
        rep[TRIAL] = target_trial
        self._designs = {}
        for a in (0, 1):
            rep[ASSIGNED] = a
            self._designs[a] = builder.matrix(rep)

    def curve(self, beta: np.ndarray, patient_weights: np.ndarray | None = None) -> np.ndarray:
        """Risk difference (treated minus untreated) at each trial visit."""
        if patient_weights is None:
            w = np.full(self.n_target, 1.0 / self.n_target)
        else:
            w = patient_weights / patient_weights.sum()
        surv = {}
        for a in (0, 1):
            hazard = expit(self._designs[a] @ beta).reshape(self.n_target, -1)
            surv[a] = np.cumprod(1.0 - hazard, axis=1)
        # survival(untreated) - survival(treated) == risk(treated) - risk(untreated)
        return (w[None, :] @ (surv[0] - surv[1])).ravel()

    def curves(self, betas: np.ndarray, patient_weights: np.ndarray | None = None) -> np.ndarray:
        """Vectorised `curve` for a (draws, p) matrix of beta vectors."""
        if patient_weights is None:
            w = np.full(self.n_target, 1.0 / self.n_target)
        else:
            w = patient_weights / patient_weights.sum()
        n_k = self.visits.size
        out = []
        for a in (0, 1):
            eta = self._designs[a] @ betas.T  # (n_target * n_k, draws)
            hazard = expit(eta).reshape(self.n_target, n_k, -1)
            surv = np.cumprod(1.0 - hazard, axis=1)
            out.append(np.einsum("i,ikd->dk", w, surv))
        return out[0] - out[1]


def estimate_mrd(
    fit: MsmFit, wx: WeightedExpansion, target_trial: int = 0
) -> MrdCurve:
    """Empirically standardised risk-difference curve for one target trial."""
    ev = MrdEvaluator(wx, fit.builder, target_trial)
    return MrdCurve(
        trial=target_trial,
        visits=ev.visits,
        values=ev.curve(fit.beta),
        n_target=ev.n_target,
    )
