"""Synthetic longitudinal cohorts with treatment-confounder feedback.

The data-generating mechanism produces, per patient, a static covariate x2,
a time-varying covariate x1 that responds to the previous treatment, a
treatment assignment driven by both covariates and the previous treatment,
and a discrete-time survival outcome. The same mechanism run with treatment
forced to each arm yields the true marginal risk-difference curve by plain
Monte Carlo, which is cached on disk keyed by a hash of the scenario.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np
import pandas as pd
from scipy.special import expit

from .datamodel import CENSORED, ID, OUTCOME, TREATMENT, VISIT, ObservationalDataset, from_frame


@dataclass(frozen=True)
class Scenario:
    """One cell of the simulation grid."""

    n_patients: int = 1000
    n_visits: int = 5
    outcome_intercept: float = -3.8  # baseline event log-odds
    treatment_intercept: float = 0.0  # treatment prevalence
    confounding: float = 0.5  # strength of x1 in both treatment and outcome
    treatment_effect: float = -0.5
    prev_treatment_on_treatment: float = 0.05
    x2_on_treatment: float = 0.2
    prev_treatment_on_x1: float = -0.3
    x2_on_outcome: float = 1.0

    def key(self) -> str:
        """Stable hash of every parameter except the sample size."""
        payload = asdict(self)
        payload.pop("n_patients")
        blob = json.dumps(payload, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _simulate_arrays(
    sc: Scenario,
    n: int,
    rng: np.random.Generator,
    forced_treatment: int | None = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Vectorised simulation; returns (x1, a, y, x2) arrays of shape (n, visits).

    `forced_treatment` overrides the treatment mechanism with a fixed arm,
    used to compute the true counterfactual risks. Outcomes are absorbing:
    the row with y == 1 is the patient's last.
    """
    x2 = rng.normal(0.0, 1.0, size=n)
    x1 = np.empty((n, sc.n_visits))
    a = np.zeros((n, sc.n_visits), dtype=int)
    y = np.zeros((n, sc.n_visits), dtype=int)
    a_prev = np.zeros(n, dtype=int)
    alive = np.ones(n, dtype=bool)
    for v in range(sc.n_visits):
        z = rng.normal(0.0, 1.0, size=n)
        x1[:, v] = rng.normal(z + sc.prev_treatment_on_x1 * a_prev, 1.0)
        if forced_treatment is None:
            p_a = expit(
                sc.treatment_intercept
                + sc.prev_treatment_on_treatment * a_prev
                + sc.confounding * x1[:, v]
                + sc.x2_on_treatment * x2
            )
            a[:, v] = rng.binomial(1, p_a)
        else:
            a[:, v] = forced_treatment
        p_y = expit(
            sc.outcome_intercept
            + sc.treatment_effect * a[:, v]
            + sc.confounding * x1[:, v]
            + sc.x2_on_outcome * x2
        )
        draw = rng.binomial(1, p_y).astype(bool)
        y[:, v] = np.where(alive, draw, 0)
        alive = alive & (y[:, v] == 0)
        a_prev = a[:, v]
    return x1, a, y, x2


def generate(sc: Scenario, seed) -> ObservationalDataset:
    """Draw one observational cohort. `seed` may be an int or a SeedSequence."""
    rng = np.random.default_rng(seed)
    n = sc.n_patients
    x1, a, y, x2 = _simulate_arrays(sc, n, rng)
    # keep rows up to and including the event visit
    event = np.where(y.any(axis=1), y.argmax(axis=1), sc.n_visits - 1)
    n_rows = event + 1
    pid = np.repeat(np.arange(n), n_rows)
    visit = np.concatenate([np.arange(r) for r in n_rows])
    frame = pd.DataFrame(
        {
            ID: pid,
            VISIT: visit,
            TREATMENT: a[pid, visit],
            OUTCOME: y[pid, visit],
            CENSORED: 0,
            "x1": x1[pid, visit],
            "x2": x2[pid],
        }
    )
    return from_frame(
        frame,
        tv_cols=("x1",),
        static_cols=("x2",),
        n_visits=sc.n_visits,
        check=False,
    )


def true_mrd(
    sc: Scenario,
    n_mc: int = 1_000_000,
    seed: int = 20_240_101,
    cache_dir: str | Path | None = None,
) -> np.ndarray:
    """True risk difference (treated minus untreated) per visit, by forced-arm
    Monte Carlo with `n_mc` patients per arm. Cached on disk when a cache
    directory is given."""
    cache_path = None
    if cache_dir is not None:
        cache_path = Path(cache_dir) / f"truth_{sc.key()}_{n_mc}_{seed}.json"
        if cache_path.exists():
            data = json.loads(cache_path.read_text())
            return np.asarray(data["mrd"], dtype=float)
    risks = {}
    for arm in (1, 0):
        rng = np.random.default_rng((seed, arm))
        _, _, y, _ = _simulate_arrays(sc, n_mc, rng, forced_treatment=arm)
        risks[arm] = np.cumsum(y, axis=1).clip(max=1).mean(axis=0)
    mrd = risks[1] - risks[0]
    if cache_path is not None:
        cache_path.parent.mkdir(parents=True, exist_ok=True)
        cache_path.write_text(
            json.dumps({"scenario": asdict(sc), "n_mc": n_mc, "seed": seed,
                        "mrd": mrd.tolist()})
        )
    return mrd


# --- the full factorial grid used in the main study ------------------------

OUTCOME_INTERCEPTS = (-4.7, -3.8, -3.0)
TREATMENT_INTERCEPTS = (-1.0, 0.0, 1.0)
CONFOUNDINGS = (0.1, 0.5, 0.9)
SAMPLE_SIZES = (200, 1000, 5000)


def scenario_grid(
    *,
    outcome_intercepts=OUTCOME_INTERCEPTS,
    treatment_intercepts=TREATMENT_INTERCEPTS,
    confoundings=CONFOUNDINGS,
    sample_sizes=SAMPLE_SIZES,
) -> list[Scenario]:
    """Full factorial grid, ordered deterministically."""
    out = []
    for ay in outcome_intercepts:
        for aa in treatment_intercepts:
            for ac in confoundings:
                for n in sample_sizes:
                    out.append(
                        Scenario(
                            n_patients=n,
                            outcome_intercept=ay,
                            treatment_intercept=aa,
                            confounding=ac,
                        )
                    )
    return out
