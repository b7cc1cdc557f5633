"""End-to-end estimation pipeline and its resampling cache.

`run_pipeline` chains expansion, weight estimation, MSM fitting and risk
difference estimation. The returned result carries a cache that lets
patient-level resampling (bootstrap, jackknife, score-based approximations)
be computed with per-patient multiplicities instead of physically duplicated
datasets: for every estimand used here (weight-model fits, the MSM point
estimate and the standardised risk difference) a patient drawn s times
contributes exactly s identical copies of its rows, so frequency weighting is
algebraically identical to explicit duplication (asserted in the tests).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from . import glm
from .datamodel import ID, OUTCOME, ObservationalDataset
from .expansion import TRIAL, TRIAL_VISIT, expand
from .msm import MrdCurve, MrdEvaluator, MsmFit, MsmSpec, estimate_mrd, fit_msm
from .weights import (
    ProbModel,
    WeightModelSpec,
    WeightModels,
    WeightedExpansion,
    compute_weights,
    fit_weight_models,
    patient_codes,
    weight_values,
)


@dataclass(frozen=True)
class PipelineSpec:
    weight_spec: WeightModelSpec
    msm_spec: MsmSpec
    target_trial: int = 0


@dataclass
class ModelCache:
    """Score/information pieces of one fitted weight model, per stratum."""

    x: np.ndarray
    y: np.ndarray
    pid_codes: np.ndarray
    beta: np.ndarray
    info: np.ndarray  # observed information at beta
    patient_scores: np.ndarray  # (n_patients, p) score sums per patient


@dataclass
class PipelineCache:
    """Everything needed to recompute the estimate under patient multiplicities."""

    n_patients: int
    models: WeightModels
    row_codes: np.ndarray  # expansion row -> patient index
    m_arr: np.ndarray
    k_arr: np.ndarray
    x_msm: np.ndarray
    y_msm: np.ndarray
    w_orig: np.ndarray  # original stabilised weights per expansion row
    bad_orig: np.ndarray
    beta: np.ndarray
    est_msm: np.ndarray  # mask of columns estimable in the original MSM fit
    info_msm: np.ndarray  # observed information at beta with original weights
    evaluator: MrdEvaluator
    target_codes: np.ndarray  # target-population patient indices
    weight_model_caches: dict[tuple[str, int], ModelCache]


@dataclass
class PipelineResult:
    spec: PipelineSpec
    models: WeightModels
    weighted: WeightedExpansion
    msm: MsmFit
    mrd: MrdCurve
    cache: PipelineCache


class PipelineFailure(RuntimeError):
    """The point-estimation pipeline could not produce an estimate."""


def _patient_score_sums(model: ProbModel, n_patients: int) -> np.ndarray:
    prob = expit(model.x @ model.fit.beta)
    contrib = model.x * (model.y - prob)[:, None]
    if model.fit.inestimable:
        contrib[:, list(model.fit.inestimable)] = 0.0
    out = np.zeros((n_patients, model.x.shape[1]))
    np.add.at(out, model.pid_codes, contrib)
    return out


def run_pipeline(ds: ObservationalDataset, spec: PipelineSpec) -> PipelineResult:
    """Point estimation: expand, weight, fit the MSM, standardise the MRD."""
    models = fit_weight_models(ds, spec.weight_spec)
    ex = expand(ds)
    wx = compute_weights(ex, models)
    msm_fit = fit_msm(wx, spec.msm_spec)
    if not msm_fit.fit.converged:
        raise PipelineFailure("MSM fit did not converge")
    mrd = estimate_mrd(msm_fit, wx, spec.target_trial)

    n_patients = models.patients.size
    # cache uses the un-excluded expansion rows with zero weight on bad ones,
    # so row indexing stays aligned across replicates
    codes = patient_codes(models, ex.rows[ID].to_numpy())
    m_arr = ex.rows[TRIAL].to_numpy(dtype=int)
    k_arr = ex.rows[TRIAL_VISIT].to_numpy(dtype=int)
    sw_a, sw_c, bad = weight_values(models, codes, m_arr, k_arr)
    w_orig = np.where(bad, 0.0, sw_a * sw_c)
    x_msm = msm_fit.builder.matrix(ex.rows)
    y_msm = ex.rows[OUTCOME].to_numpy(dtype=float)
    info = glm.observed_information(msm_fit.fit.beta, x_msm, w_orig)

    evaluator = MrdEvaluator(wx, msm_fit.builder, spec.target_trial)
    target_codes = patient_codes(models, evaluator.patient_ids)

    wm_caches: dict[tuple[str, int], ModelCache] = {}
    for label, stratum, model in models.all_models():
        if model.kind != "logistic":
            continue
        wm_caches[(label, stratum)] = ModelCache(
            x=model.x,
            y=model.y,
            pid_codes=model.pid_codes,
            beta=model.fit.beta,
            info=glm.observed_information(model.fit.beta, model.x, np.ones(model.y.size)),
            patient_scores=_patient_score_sums(model, n_patients),
        )

    cache = PipelineCache(
        n_patients=n_patients,
        models=models,
        row_codes=codes,
        m_arr=m_arr,
        k_arr=k_arr,
        x_msm=x_msm,
        y_msm=y_msm,
        w_orig=w_orig,
        bad_orig=bad,
        beta=msm_fit.fit.beta,
        est_msm=msm_fit.fit.estimable,
        info_msm=info,
        evaluator=evaluator,
        target_codes=target_codes,
        weight_model_caches=wm_caches,
    )
    return PipelineResult(
        spec=spec, models=models, weighted=wx, msm=msm_fit, mrd=mrd, cache=cache
    )


def _refit_weight_betas(cache: PipelineCache, s: np.ndarray) -> dict[str, dict[int, object]]:
    """Refit every weight model with patient multiplicities as frequency weights.

    Returns beta overrides per model group; a replicate whose responses are
    constant among the sampled rows collapses to a constant probability.
    """
    overrides: dict[str, dict[int, object]] = {
        "treatment_den": {},
        "treatment_num": {},
        "censor_den": {},
        "censor_num": {},
    }
    for (label, stratum), mc in cache.weight_model_caches.items():
        freq = s[mc.pid_codes].astype(float)
        sampled = freq > 0
        if not sampled.any():
            # stratum unsampled: only zero-multiplicity rows can reference it,
            # so the original coefficients are as good as any
            overrides[label][stratum] = mc.beta
            continue
        y_s = mc.y[sampled]
        if np.all(y_s == y_s[0]):
            overrides[label][stratum] = float(y_s[0])
            continue
        fit = glm.fit_weighted_logistic(mc.x, mc.y, freq, beta0=np.clip(mc.beta, -8.0, 8.0))
        if not fit.converged:
            raise PipelineFailure(f"{label} stratum {stratum} refit did not converge")
        overrides[label][stratum] = fit.beta
    return overrides


def _lef_weight_betas(cache: PipelineCache, s: np.ndarray) -> dict[str, dict[int, object]]:
    """One-step score update of every weight model under multiplicities s."""
    overrides: dict[str, dict[int, object]] = {
        "treatment_den": {},
        "treatment_num": {},
        "censor_den": {},
        "censor_num": {},
    }
    for (label, stratum), mc in cache.weight_model_caches.items():
        u = mc.patient_scores.T @ s.astype(float)
        try:
            step = np.linalg.solve(mc.info, u)
        except np.linalg.LinAlgError as err:
            raise PipelineFailure(f"singular information in {label} stratum {stratum}") from err
        overrides[label][stratum] = mc.beta + step
    return overrides


def _replicate_weights(cache: PipelineCache, overrides) -> np.ndarray:
    sw_a, sw_c, bad = weight_values(
        cache.models,
        cache.row_codes,
        cache.m_arr,
        cache.k_arr,
        treat_betas=overrides["treatment_den"] or None,
        num_treat_betas=overrides["treatment_num"] or None,
        censor_betas=overrides["censor_den"] or None,
        num_censor_betas=overrides["censor_num"] or None,
    )
    return np.where(bad, 0.0, sw_a * sw_c)


def refit_replicate(cache: PipelineCache, s: np.ndarray) -> np.ndarray:
    """Full re-estimation under patient multiplicities s: weight models,
    MSM and the standardised risk-difference curve. Raises PipelineFailure
    when any fit fails."""
    overrides = _refit_weight_betas(cache, s)
    w = _replicate_weights(cache, overrides)
    row_w = w * s[cache.row_codes]
    if not np.all(np.isfinite(row_w)):
        raise PipelineFailure("non-finite replicate weights")
    if not np.any(row_w > 0):
        raise PipelineFailure("no rows with positive weight in replicate")
    # warm start, clipped: boundary components of the original fit (a stratum
    # with no events) would otherwise start the replicate at zero curvature
    beta0 = np.clip(cache.beta, -8.0, 8.0)
    fit = glm.fit_weighted_logistic(cache.x_msm, cache.y_msm, row_w, beta0=beta0)
    if not fit.converged:
        raise PipelineFailure("replicate MSM fit did not converge")
    return cache.evaluator.curve(fit.beta, s[cache.target_codes].astype(float))


def lef_replicate(cache: PipelineCache, s: np.ndarray, mode: str) -> np.ndarray:
    """Score-based one-step replicate estimate under multiplicities s.

    mode="outcome_only": weight models are refitted on the replicate, then the
    MSM coefficients take a single Newton step from the original estimate.
    mode="both": the weight-model coefficients are updated by one-step score
    corrections as well; no iterative fitting at all.
    """
    if mode == "outcome_only":
        overrides = _refit_weight_betas(cache, s)
    elif mode == "both":
        overrides = _lef_weight_betas(cache, s)
    else:
        raise ValueError(f"unknown LEF mode {mode!r}")
    w = _replicate_weights(cache, overrides)
    row_w = w * s[cache.row_codes]
    if not np.all(np.isfinite(row_w)):
        raise PipelineFailure("non-finite replicate weights")
    resid = cache.y_msm - expit(cache.x_msm @ cache.beta)
    u = cache.x_msm.T @ (row_w * resid)
    # restrict to the subspace that was estimable in the original fit
    est = cache.est_msm
    beta = cache.beta.copy()
    try:
        step = np.linalg.solve(cache.info_msm[np.ix_(est, est)], u[est])
    except np.linalg.LinAlgError as err:
        raise PipelineFailure("singular cached MSM information") from err
    beta[est] = beta[est] + step
    return cache.evaluator.curve(beta, s[cache.target_codes].astype(float))


def lef_beta(cache: PipelineCache, s: np.ndarray, mode: str) -> np.ndarray:
    """The one-step coefficient vector itself (exposed for diagnostics)."""
    if mode == "outcome_only":
        overrides = _refit_weight_betas(cache, s)
    else:
        overrides = _lef_weight_betas(cache, s)
    w = _replicate_weights(cache, overrides)
    row_w = w * s[cache.row_codes]
    resid = cache.y_msm - expit(cache.x_msm @ cache.beta)
    u = cache.x_msm.T @ (row_w * resid)
    est = cache.est_msm
    beta = cache.beta.copy()
    step = np.linalg.solve(cache.info_msm[np.ix_(est, est)], u[est])
    beta[est] = beta[est] + step
    return beta
