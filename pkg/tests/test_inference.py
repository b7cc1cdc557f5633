"""Confidence-interval constructors: algebraic identities and hand oracles."""

import numpy as np
import pandas as pd
import pytest

from seqtrial.datamodel import from_frame
from seqtrial.inference import (
    METHODS,
    compute_ci,
    jackknife_se,
    jackknife_vcov,
    percentile,
    _pivot_ci,
)
from seqtrial.msm import MsmSpec
from seqtrial.pipeline import (
    PipelineSpec,
    lef_beta,
    refit_replicate,
    run_pipeline,
)
from seqtrial.simulation import Scenario, generate
from seqtrial.weights import WeightModelSpec


def pipeline_spec():
    return PipelineSpec(
        weight_spec=WeightModelSpec(denominator_covariates=("x1", "x2"), censoring=False),
        msm_spec=MsmSpec(baseline_covariates=("x1", "x2")),
    )


def small_result(seed=0, n=120):
    ds = generate(Scenario(n_patients=n), seed)
    return run_pipeline(ds, pipeline_spec())


class TestPercentile:
    def test_linear_interpolation_convention(self):
        # h = (n-1) q + 1 = 1.75 -> value between the 1st and 2nd order stats
        assert percentile(np.array([1.0, 2.0, 3.0, 4.0]), 0.25) == pytest.approx(1.75)

    def test_extremes(self):
        v = np.array([5.0, 1.0, 3.0])
        assert percentile(v, 0.0) == 1.0
        assert percentile(v, 1.0) == 5.0

    def test_matrix_axis(self):
        m = np.array([[1.0, 10.0], [2.0, 20.0], [3.0, 30.0]])
        np.testing.assert_allclose(percentile(m, 0.5), [2.0, 20.0])


class TestJackknifeFormulas:
    def test_sample_mean_se_equals_s_over_sqrt_n(self):
        # classical identity: jackknife SE of the mean is s / sqrt(n), exactly
        r = np.random.default_rng(0)
        x = r.normal(size=25)
        n = x.size
        full = x.mean()
        loo = np.array([np.delete(x, i).mean() for i in range(n)])
        se = jackknife_se(loo[:, None], np.array([full]))[0]
        expected = x.std(ddof=1) / np.sqrt(n)
        assert abs(se - expected) < 1e-12

    def test_pseudo_value_vcov_hand_arithmetic_four_patients(self):
        beta_full = np.array([1.0, -2.0])
        loo = np.array(
            [[1.1, -2.2], [0.9, -1.9], [1.05, -2.05], [0.95, -1.85]]
        )
        got = jackknife_vcov(beta_full, loo)
        # hand arithmetic with explicit loops
        n = 4
        pseudo = [
            [n * beta_full[j] - (n - 1) * loo[i][j] for j in range(2)]
            for i in range(n)
        ]
        mean = [sum(p[j] for p in pseudo) / n for j in range(2)]
        expect = [[0.0, 0.0], [0.0, 0.0]]
        for p in pseudo:
            for j in range(2):
                for k in range(2):
                    expect[j][k] += (p[j] - mean[j]) * (p[k] - mean[k])
        for j in range(2):
            for k in range(2):
                expect[j][k] /= n * (n - 1)
        np.testing.assert_allclose(got, np.array(expect), atol=1e-12)


class TestPivotAlgebra:
    def test_reflection_about_point_estimate(self):
        result = small_result()
        point = result.mrd.values
        curves = [point + d for d in np.linspace(-0.05, 0.05, 41)]
        ci = _pivot_ci(result, curves, 0, 41, "boot")
        arr = np.asarray(curves)
        np.testing.assert_allclose(ci.lower, 2 * point - percentile(arr, 0.975), atol=1e-12)
        np.testing.assert_allclose(ci.upper, 2 * point - percentile(arr, 0.025), atol=1e-12)
        assert np.all(ci.lower <= ci.upper)

    def test_failure_threshold_over_half(self):
        result = small_result()
        curves = [result.mrd.values] * 40
        ci = _pivot_ci(result, curves, 61, 100, "boot")
        assert not ci.ok
        assert "61/100" in ci.failure

    def test_failure_threshold_at_half_still_ok(self):
        result = small_result()
        curves = [result.mrd.values] * 50
        ci = _pivot_ci(result, curves, 50, 100, "boot")
        assert ci.ok


class TestLefIdentity:
    def test_original_multiplicities_reproduce_estimate_20_datasets(self):
        # a high event rate and a parsimonious hazard model keep every
        # coefficient interior; the one-step identity breaks down at boundary
        # maxima, where the score equation has a 0/0 coordinate
        spec = PipelineSpec(
            weight_spec=WeightModelSpec(
                denominator_covariates=("x1", "x2"), censoring=False
            ),
            msm_spec=MsmSpec(
                visit_term="linear", treatment_term="constant",
                baseline_covariates=("x1", "x2"),
            ),
        )
        for seed in range(20):
            ds = generate(
                Scenario(n_patients=200, outcome_intercept=-2.0, n_visits=3), seed
            )
            res = run_pipeline(ds, spec)
            assert np.max(np.abs(res.cache.beta)) < 10, seed
            ones = np.ones(res.cache.n_patients, dtype=int)
            est = res.msm.fit.estimable
            for mode in ("outcome_only", "both"):
                beta = lef_beta(res.cache, ones, mode)
                assert np.max(np.abs((beta - res.cache.beta)[est])) < 1e-10, (seed, mode)


class TestMultiplicityEquivalence:
    def test_refit_replicate_matches_physical_duplication(self):
        ds = generate(Scenario(n_patients=70), 11)
        res = run_pipeline(ds, pipeline_spec())
        n = res.cache.n_patients
        r = np.random.default_rng(3)
        s = np.bincount(r.integers(0, n, n), minlength=n)
        got = refit_replicate(res.cache, s)

        # physically duplicated cohort with fresh patient ids
        patients = res.models.patients
        frames = []
        for i, pid in enumerate(patients):
            block = ds.visits[ds.visits["patient_id"] == pid]
            for copy in range(int(s[i])):
                dup = block.copy()
                dup["patient_id"] = f"{pid}_copy{copy}"
                frames.append(dup)
        dup_ds = from_frame(
            pd.concat(frames, ignore_index=True),
            tv_cols=ds.tv_cols, static_cols=ds.static_cols, n_visits=ds.n_visits,
            check=False,
        )
        dup_res = run_pipeline(dup_ds, pipeline_spec())
        np.testing.assert_allclose(got, dup_res.mrd.values, atol=1e-6)


class TestEndToEndMethods:
    def test_all_methods_produce_results_and_are_deterministic(self):
        res = small_result(seed=20, n=150)
        for m in METHODS:
            c1 = compute_ci(res, m, n_boot=40, n_draws=40, seed=9)
            c2 = compute_ci(res, m, n_boot=40, n_draws=40, seed=9)
            assert c1.ok == c2.ok, m
            if c1.ok:
                np.testing.assert_array_equal(c1.lower, c2.lower)
                np.testing.assert_array_equal(c1.upper, c2.upper)
                assert np.all(c1.lower <= c1.upper)
                np.testing.assert_allclose(c1.point, res.mrd.values)

    def test_unknown_method_rejected(self):
        res = small_result(seed=21, n=80)
        with pytest.raises(ValueError):
            compute_ci(res, "nope")

    def test_to_records_shape(self):
        res = small_result(seed=22, n=100)
        ci = compute_ci(res, "sandwich", n_draws=30, seed=1)
        recs = ci.to_records()
        assert len(recs) == res.mrd.visits.size
        assert {r["method"] for r in recs} == {"sandwich"}
