"""Confidence intervals for the standardised risk-difference curve.

Six constructors over a shared pipeline result:

- sandwich:    sample coefficient vectors from a multivariate normal centred
               at the estimate with the cluster-robust covariance, and take
               pointwise percentiles of the induced risk-difference curves.
- boot:        nonparametric patient-level bootstrap with full re-estimation
               per replicate and a non-Studentised pivot interval.
- lef-outcome: bootstrap where each replicate refits the weight models but
               takes a single score step for the outcome-model coefficients.
- lef-both:    bootstrap where weight and outcome coefficients are both
               updated by single score steps (no iterative fitting at all).
- jk-wald:     leave-one-patient-out standard errors with a normal interval.
- jk-mvn:      jackknife covariance of the coefficient pseudo-values, then
               multivariate-normal sampling as in the sandwich method.

Failures are recorded per method as data, not raised: a method that cannot
produce an interval yields a CiResult with `failure` set.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import glm
from .glm import ConstructionFailure
from .pipeline import (
    PipelineFailure,
    PipelineResult,
    _refit_weight_betas,
    _replicate_weights,
    lef_replicate,
    refit_replicate,
)

Z975 = 1.959963984540054  # standard normal 97.5% quantile

METHODS = ("sandwich", "boot", "lef-outcome", "lef-both", "jk-wald", "jk-mvn")

# the share of replicates that may fail before the interval itself fails
BOOT_FAILURE_LIMIT = 0.5
JACKKNIFE_FAILURE_LIMIT = 0.1


@dataclass
class CiResult:
    method: str
    visits: np.ndarray
    point: np.ndarray
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None
    resample_sd: np.ndarray | None = None
    failure: str | None = None
    n_replicates: int = 0
    n_replicates_failed: int = 0
    elapsed: float = 0.0

    @property
    def ok(self) -> bool:
        return self.failure is None

    def to_records(self) -> list[dict]:
        out = []
        for i, k in enumerate(self.visits):
            out.append(
                {
                    "method": self.method,
                    "visit": int(k),
                    "mrd": float(self.point[i]),
                    "lower": None if self.lower is None else float(self.lower[i]),
                    "upper": None if self.upper is None else float(self.upper[i]),
                    "resample_sd": None
                    if self.resample_sd is None
                    else float(self.resample_sd[i]),
                    "failure": self.failure,
                }
            )
        return out


def percentile(values: np.ndarray, q: float, axis: int = 0) -> np.ndarray:
    """Quantile with linear interpolation at position h = (n - 1) q + 1."""
    return np.quantile(np.asarray(values, dtype=float), q, axis=axis, method="linear")


def jackknife_se(loo: np.ndarray, full: np.ndarray) -> np.ndarray:
    """SE from leave-one-out estimates: sqrt((n-1)/n * sum((loo - full)^2))."""
    loo = np.asarray(loo, dtype=float)
    n = loo.shape[0]
    return np.sqrt((n - 1) / n * np.sum((loo - full) ** 2, axis=0))


def jackknife_vcov(beta_full: np.ndarray, loo_betas: np.ndarray) -> np.ndarray:
    """Covariance of the jackknife pseudo-values n*b - (n-1)*b_(-i):
    sum_i (p_i - p_bar)(p_i - p_bar)^T / (n (n - 1))."""
    loo_betas = np.asarray(loo_betas, dtype=float)
    m = loo_betas.shape[0]
    pseudo = m * np.asarray(beta_full, dtype=float)[None, :] - (m - 1) * loo_betas
    centred = pseudo - pseudo.mean(axis=0)
    return centred.T @ centred / (m * (m - 1))


def _mvn_draws(beta: np.ndarray, vcov: np.ndarray, n_draws: int, rng) -> np.ndarray | str:
    """Draws via the lower Cholesky factor; a zero matrix yields point mass."""
    p = beta.size
    try:
        chol = np.linalg.cholesky(vcov)
    except np.linalg.LinAlgError:
        if np.allclose(vcov, 0.0):
            chol = np.zeros((p, p))
        else:
            # the covariance is PD on its non-degenerate block; retry there
            nz = np.abs(np.diag(vcov)) > 0
            if not nz.any():
                return "covariance matrix has no positive diagonal"
            try:
                sub = np.linalg.cholesky(vcov[np.ix_(nz, nz)])
            except np.linalg.LinAlgError:
                return "covariance matrix is not positive semi-definite"
            chol = np.zeros((p, p))
            chol[np.ix_(nz, nz)] = sub
    z = rng.standard_normal((n_draws, p))
    return beta[None, :] + z @ chol.T


def _mvn_percentile_ci(result: PipelineResult, vcov, n_draws, rng, method) -> CiResult:
    point = result.mrd.values
    visits = result.mrd.visits
    if isinstance(vcov, ConstructionFailure):
        return CiResult(method, visits, point, failure=vcov.reason)
    draws = _mvn_draws(result.cache.beta, vcov, n_draws, rng)
    if isinstance(draws, str):
        return CiResult(method, visits, point, failure=draws)
    curves = result.cache.evaluator.curves(draws)
    return CiResult(
        method,
        visits,
        point,
        lower=percentile(curves, 0.025),
        upper=percentile(curves, 0.975),
        resample_sd=np.std(curves, axis=0, ddof=1),
        n_replicates=n_draws,
    )


def ci_sandwich(result: PipelineResult, n_draws: int = 500, seed=0) -> CiResult:
    """Multivariate-normal sampling from the cluster-robust covariance."""
    rng = np.random.default_rng(seed)
    return _mvn_percentile_ci(result, result.msm.sandwich, n_draws, rng, "sandwich")


def _bootstrap_curves(result: PipelineResult, n_boot, rng, replicate_fn):
    n = result.cache.n_patients
    curves = []
    n_failed = 0
    for _ in range(n_boot):
        draw = rng.integers(0, n, size=n)
        s = np.bincount(draw, minlength=n)
        try:
            curves.append(replicate_fn(result.cache, s))
        except PipelineFailure:
            n_failed += 1
    return curves, n_failed


def _pivot_ci(result, curves, n_failed, n_boot, method) -> CiResult:
    point = result.mrd.values
    visits = result.mrd.visits
    if n_failed > BOOT_FAILURE_LIMIT * n_boot:
        return CiResult(
            method,
            visits,
            point,
            failure=f"{n_failed}/{n_boot} bootstrap replicates failed",
            n_replicates=n_boot,
            n_replicates_failed=n_failed,
        )
    arr = np.asarray(curves)
    # non-Studentised pivot: reflect the replicate quantiles about the estimate
    lower = 2.0 * point - percentile(arr, 0.975)
    upper = 2.0 * point - percentile(arr, 0.025)
    return CiResult(
        method,
        visits,
        point,
        lower=lower,
        upper=upper,
        resample_sd=np.std(arr, axis=0, ddof=1),
        n_replicates=n_boot,
        n_replicates_failed=n_failed,
    )


def ci_boot(result: PipelineResult, n_boot: int = 500, seed=0) -> CiResult:
    """Full nonparametric bootstrap with a non-Studentised pivot interval."""
    rng = np.random.default_rng(seed)
    curves, n_failed = _bootstrap_curves(result, n_boot, rng, refit_replicate)
    return _pivot_ci(result, curves, n_failed, n_boot, "boot")


def ci_lef(result: PipelineResult, mode: str, n_boot: int = 500, seed=0) -> CiResult:
    """Score-step bootstrap; mode is 'outcome_only' or 'both'."""
    rng = np.random.default_rng(seed)
    fn = lambda cache, s: lef_replicate(cache, s, mode)
    curves, n_failed = _bootstrap_curves(result, n_boot, rng, fn)
    method = "lef-outcome" if mode == "outcome_only" else "lef-both"
    return _pivot_ci(result, curves, n_failed, n_boot, method)


def _loo_estimates(result: PipelineResult) -> tuple[dict, bool]:
    """Leave-one-patient-out refits: curves and coefficient vectors.

    Computed once per pipeline result and memoised, since both jackknife
    methods consume the same refits. Returns (cache, was_already_cached);
    `elapsed` in the cache is the cost of the shared pass, charged to each
    consumer so per-method timings reflect standalone cost.
    """
    cached = getattr(result, "_loo_cache", None)
    if cached is not None:
        return cached, True
    t0 = time.perf_counter()
    cache = result.cache
    n = cache.n_patients
    curves, betas = [], []
    n_failed = 0
    base = np.ones(n, dtype=int)
    for i in range(n):
        s = base.copy()
        s[i] = 0
        try:
            overrides = _refit_weight_betas(cache, s)
            w = _replicate_weights(cache, overrides)
            row_w = w * s[cache.row_codes]
            if not np.any(row_w > 0):
                raise PipelineFailure("no rows with positive weight")
            fit = glm.fit_weighted_logistic(
                cache.x_msm, cache.y_msm, row_w, beta0=np.clip(cache.beta, -8.0, 8.0)
            )
            if not fit.converged:
                raise PipelineFailure("leave-one-out MSM fit did not converge")
            betas.append(fit.beta)
            curves.append(cache.evaluator.curve(fit.beta, s[cache.target_codes].astype(float)))
        except PipelineFailure:
            n_failed += 1
    loo = {
        "curves": np.asarray(curves),
        "betas": np.asarray(betas),
        "n_failed": n_failed,
        "elapsed": time.perf_counter() - t0,
    }
    result._loo_cache = loo
    return loo, False


def ci_jackknife_wald(result: PipelineResult, seed=0) -> CiResult:
    """Leave-one-out standard errors with a symmetric normal interval."""
    point = result.mrd.values
    visits = result.mrd.visits
    n = result.cache.n_patients
    loo, was_cached = _loo_estimates(result)
    extra = loo["elapsed"] if was_cached else 0.0
    n_failed = loo["n_failed"]
    if n_failed > JACKKNIFE_FAILURE_LIMIT * n:
        return CiResult(
            "jk-wald",
            visits,
            point,
            failure=f"{n_failed}/{n} leave-one-out refits failed",
            n_replicates=n,
            n_replicates_failed=n_failed,
            elapsed=extra,
        )
    se = jackknife_se(loo["curves"], point)
    return CiResult(
        "jk-wald",
        visits,
        point,
        lower=point - Z975 * se,
        upper=point + Z975 * se,
        resample_sd=se,
        n_replicates=n,
        n_replicates_failed=n_failed,
        elapsed=extra,
    )


def ci_jackknife_mvn(result: PipelineResult, n_draws: int = 500, seed=0) -> CiResult:
    """Jackknife covariance of coefficient pseudo-values, then MVN sampling."""
    point = result.mrd.values
    visits = result.mrd.visits
    cache = result.cache
    n = cache.n_patients
    loo, was_cached = _loo_estimates(result)
    extra = loo["elapsed"] if was_cached else 0.0
    n_failed = loo["n_failed"]
    if n_failed > JACKKNIFE_FAILURE_LIMIT * n:
        return CiResult(
            "jk-mvn",
            visits,
            point,
            failure=f"{n_failed}/{n} leave-one-out refits failed",
            n_replicates=n,
            n_replicates_failed=n_failed,
            elapsed=extra,
        )
    vcov = jackknife_vcov(cache.beta, loo["betas"])
    rng = np.random.default_rng(seed)
    out = _mvn_percentile_ci(result, vcov, n_draws, rng, "jk-mvn")
    out.n_replicates = n
    out.n_replicates_failed = n_failed
    out.elapsed = extra
    return out


def compute_ci(
    result: PipelineResult,
    method: str,
    *,
    n_boot: int = 500,
    n_draws: int = 500,
    seed=0,
) -> CiResult:
    """Dispatch a single CI method by name, timing it."""
    t0 = time.perf_counter()
    if method == "sandwich":
        out = ci_sandwich(result, n_draws=n_draws, seed=seed)
    elif method == "boot":
        out = ci_boot(result, n_boot=n_boot, seed=seed)
    elif method == "lef-outcome":
        out = ci_lef(result, "outcome_only", n_boot=n_boot, seed=seed)
    elif method == "lef-both":
        out = ci_lef(result, "both", n_boot=n_boot, seed=seed)
    elif method == "jk-wald":
        out = ci_jackknife_wald(result, seed=seed)
    elif method == "jk-mvn":
        out = ci_jackknife_mvn(result, n_draws=n_draws, seed=seed)
    else:
        raise ValueError(f"unknown CI method {method!r}")
    # `elapsed` coming out of a constructor is cost charged from shared,
    # memoised work (the leave-one-out pass); add this call's own wall time
    out.elapsed += time.perf_counter() - t0
    return out
