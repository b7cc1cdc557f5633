"""Weighted logistic regression with clustered sandwich variance.

This is the numerical kernel shared by the treatment/censoring weight models
and the pooled outcome model. Fitting is Newton-Raphson (equivalently IRLS)
with step-halving; rank-deficient or separated columns are detected with a
pivoted Cholesky factorisation of the information matrix and their
coefficients are pinned to zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit


@dataclass(frozen=True)
class ConstructionFailure:
    """A variance matrix that could not be constructed; recorded, not raised."""

    reason: str


@dataclass
class LogisticFit:
    beta: np.ndarray
    model_vcov: np.ndarray
    converged: bool
    iterations: int
    inestimable: tuple[int, ...] = ()
    loglik: float = float("nan")

    @property
    def estimable(self) -> np.ndarray:
        mask = np.ones(self.beta.shape[0], dtype=bool)
        mask[list(self.inestimable)] = False
        return mask


def _weighted_loglik(eta: np.ndarray, y: np.ndarray, w: np.ndarray) -> float:
    # w * (y*eta - log(1 + exp(eta))), stable for large |eta|; a divergent
    # candidate produces -inf/nan, which the step-halving guards reject
    with np.errstate(invalid="ignore", over="ignore"):
        return float(np.sum(w * (y * eta - np.logaddexp(0.0, eta))))


def _pivoted_cholesky_mask(h: np.ndarray, rtol: float) -> np.ndarray:
    """Greedy pivoted Cholesky; returns a mask of numerically estimable columns.

    A column is dropped when its pivot falls below rtol times the leading pivot.
    """
    p = h.shape[0]
    a = h.copy()
    keep = np.zeros(p, dtype=bool)
    active = np.ones(p, dtype=bool)
    lead_pivot = None
    for _ in range(p):
        diag = np.where(active, np.diagonal(a), -np.inf)
        j = int(np.argmax(diag))
        pivot = diag[j]
        if lead_pivot is None:
            lead_pivot = pivot if pivot > 0 else 0.0
        if lead_pivot <= 0 or pivot < rtol * lead_pivot:
            break
        keep[j] = True
        active[j] = False
        # rank-one downdate; eliminated rows/columns are never read again
        a -= np.outer(a[:, j] / pivot, a[j, :])
    return keep


def fit_weighted_logistic(
    x: np.ndarray,
    y: np.ndarray,
    w: np.ndarray,
    *,
    tol: float = 1e-8,
    beta_rtol: float = 1e-10,
    max_iter: int = 50,
    pivot_rtol: float = 1e-10,
    beta0: np.ndarray | None = None,
) -> LogisticFit:
    """Maximise the w-weighted Bernoulli log-likelihood.

    Convergence when the maximum absolute score component drops below `tol`
    or the relative change in beta drops below `beta_rtol`. Non-convergence
    after `max_iter` returns a fit flagged converged=False.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    w = np.asarray(w, dtype=float)
    n, p = x.shape
    if n < 1 or p < 1:
        raise ValueError("design matrix must be non-empty")
    if not np.any(w > 0):
        raise ValueError("weights must not be all zero")

    beta = np.zeros(p) if beta0 is None else np.array(beta0, dtype=float)
    active = np.ones(p, dtype=bool)
    ll = _weighted_loglik(x @ beta, y, w)
    converged = False
    it = 0
    h_active = np.zeros((0, 0))

    need_mask = True
    while it < max_iter:
        it += 1
        eta = x @ beta
        prob = expit(eta)
        resid = w * (y - prob)
        score = x.T @ resid
        wt = w * prob * (1.0 - prob)
        h = (x * wt[:, None]).T @ x

        # drop rank-deficient / separated columns permanently; checked on the
        # first iteration and again only if a Newton solve fails, since rank
        # deficiency is a property of the data, not the iterate
        masked_now = False
        if need_mask:
            need_mask = False
            masked_now = True
            sub = _pivoted_cholesky_mask(h[np.ix_(active, active)], pivot_rtol)
            if not sub.all():
                idx = np.flatnonzero(active)
                active[idx[~sub]] = False
                beta[~active] = 0.0
                eta = x @ beta
                prob = expit(eta)
                resid = w * (y - prob)
                score = x.T @ resid
                wt = w * prob * (1.0 - prob)
                h = (x * wt[:, None]).T @ x
        if not active.any():
            break

        h_active = h[np.ix_(active, active)]
        if np.max(np.abs(score[active])) < tol:
            converged = True
            # one polishing step: quadratic convergence leaves the score at
            # machine precision, which downstream one-step identities rely on
            try:
                polish = np.linalg.solve(h_active, score[active])
            except np.linalg.LinAlgError:
                break
            cand = beta.copy()
            cand[active] = beta[active] + polish
            cand_ll = _weighted_loglik(x @ cand, y, w)
            if cand_ll >= ll - 1e-12:
                beta = cand
                ll = cand_ll
                prob = expit(x @ beta)
                wt = w * prob * (1.0 - prob)
                h_active = ((x * wt[:, None]).T @ x)[np.ix_(active, active)]
            break

        try:
            step = np.linalg.solve(h_active, score[active])
        except np.linalg.LinAlgError:
            if masked_now:
                break
            # the iterate may have drifted into numerical separation;
            # re-derive the estimable set and retry
            need_mask = True
            continue

        # step-halving on log-likelihood decrease
        ll_prev = ll
        new_beta = beta.copy()
        scale = 1.0
        for _ in range(30):
            cand = beta.copy()
            cand[active] = beta[active] + scale * step
            cand_ll = _weighted_loglik(x @ cand, y, w)
            if cand_ll >= ll - 1e-12:
                new_beta = cand
                ll = cand_ll
                break
            scale *= 0.5
        delta = np.abs(new_beta - beta)
        rel = np.max(delta / (1.0 + np.abs(beta))) if p else 0.0
        beta = new_beta
        # deviance-change stop also covers boundary maxima (e.g. a stratum
        # with no events, whose intercept legitimately diverges to -inf)
        ll_settled = abs(ll - ll_prev) < 1e-8 * (abs(ll) + 0.1)
        if rel < beta_rtol or ll_settled:
            converged = True
            # polish with up to two further Newton steps (rejected if the
            # likelihood would decrease, as near boundary maxima): quadratic
            # convergence leaves interior scores at machine precision, which
            # downstream one-step identities rely on
            for _ in range(2):
                prob = expit(x @ beta)
                score = x.T @ (w * (y - prob))
                wt = w * prob * (1.0 - prob)
                h_active = ((x * wt[:, None]).T @ x)[np.ix_(active, active)]
                scale = max(np.max(np.abs(h_active)), 1.0)
                if np.max(np.abs(score[active])) < 1e-11 * scale:
                    break
                try:
                    polish = np.linalg.solve(h_active, score[active])
                except np.linalg.LinAlgError:
                    break
                cand = beta.copy()
                cand[active] = beta[active] + polish
                cand_ll = _weighted_loglik(x @ cand, y, w)
                if cand_ll < ll - 1e-12:
                    break
                beta = cand
                ll = cand_ll
            prob = expit(x @ beta)
            wt = w * prob * (1.0 - prob)
            h_active = ((x * wt[:, None]).T @ x)[np.ix_(active, active)]
            break

    vcov = np.zeros((p, p))
    if active.any() and h_active.size:
        try:
            vcov[np.ix_(active, active)] = np.linalg.inv(h_active)
        except np.linalg.LinAlgError:
            pass
    inest = tuple(int(j) for j in np.flatnonzero(~active))
    return LogisticFit(
        beta=beta,
        model_vcov=vcov,
        converged=bool(converged),
        iterations=it,
        inestimable=inest,
        loglik=ll,
    )


def predict_prob(beta: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Elementwise inverse-logit of the linear predictor."""
    return expit(np.asarray(x, dtype=float) @ np.asarray(beta, dtype=float))


def score_contributions(
    beta: np.ndarray,
    x: np.ndarray,
    y: np.ndarray,
    w: np.ndarray,
    clusters: np.ndarray,
    inestimable: tuple[int, ...] = (),
) -> tuple[np.ndarray, np.ndarray]:
    """Per-cluster score vectors U_i = sum_r w_r x_r (y_r - p_r).

    Returns (cluster_ids, U) with rows ordered by first appearance of each
    cluster. Inestimable columns contribute zero components.
    """
    x = np.asarray(x, dtype=float)
    prob = expit(x @ beta)
    resid = np.asarray(w, dtype=float) * (np.asarray(y, dtype=float) - prob)
    contrib = x * resid[:, None]
    if inestimable:
        contrib[:, list(inestimable)] = 0.0
    ids, inverse = np.unique(np.asarray(clusters), return_inverse=True)
    u = np.zeros((ids.shape[0], x.shape[1]))
    np.add.at(u, inverse, contrib)
    return ids, u


def observed_information(beta: np.ndarray, x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """H = sum_r w_r p_r (1-p_r) x_r x_r^T; symmetric by construction."""
    x = np.asarray(x, dtype=float)
    prob = expit(x @ beta)
    wt = np.asarray(w, dtype=float) * prob * (1.0 - prob)
    return (x * wt[:, None]).T @ x


def sandwich_vcov(
    fit: LogisticFit,
    x: np.ndarray,
    y: np.ndarray,
    w: np.ndarray,
    clusters: np.ndarray,
    *,
    symmetry_rtol: float = 1e-8,
) -> np.ndarray | ConstructionFailure:
    """Cluster-robust variance H^-1 (sum_i U_i U_i^T) H^-1 on the estimable subspace.

    Failures (singular bread, asymmetry beyond tolerance, non-positive-definite
    result) are returned as ConstructionFailure rather than raised.
    """
    p = fit.beta.shape[0]
    active = fit.estimable
    if not active.any():
        return ConstructionFailure("no estimable coefficients")
    h = observed_information(fit.beta, x, w)[np.ix_(active, active)]
    _, u = score_contributions(fit.beta, x, y, w, clusters, fit.inestimable)
    meat = u[:, active].T @ u[:, active]
    try:
        bread = np.linalg.inv(h)
    except np.linalg.LinAlgError:
        return ConstructionFailure("singular information matrix")
    m = bread @ meat @ bread
    asym = np.max(np.abs(m - m.T))
    scale = np.max(np.abs(m))
    if scale > 0 and asym > symmetry_rtol * scale:
        return ConstructionFailure(f"asymmetric sandwich matrix (rel {asym / scale:.2e})")
    m = 0.5 * (m + m.T)
    try:
        np.linalg.cholesky(m)
    except np.linalg.LinAlgError:
        return ConstructionFailure("sandwich matrix not positive definite")
    out = np.zeros((p, p))
    out[np.ix_(active, active)] = m
    return out
