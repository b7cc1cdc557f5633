"""YAML analysis configuration resolving to a fully-specified pipeline.

One archivable file carries the input schema, the weight- and outcome-model
specifications and the resampling plan. Unknown keys fail loudly with the
path to the offending entry.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .datamodel import Schema
from .msm import MsmSpec
from .pipeline import PipelineSpec
from .weights import WeightModelSpec


class ConfigError(ValueError):
    """Configuration file invalid; message carries the key path."""


@dataclass(frozen=True)
class ResamplePlan:
    n_boot: int = 500
    n_draws: int = 500
    seed: int = 0


@dataclass(frozen=True)
class Config:
    schema: Schema = field(default_factory=Schema)
    pipeline: PipelineSpec = field(
        default_factory=lambda: PipelineSpec(WeightModelSpec(), MsmSpec())
    )
    resample: ResamplePlan = field(default_factory=ResamplePlan)
    methods: tuple[str, ...] = ("sandwich",)
    threads: int = 1


_SCHEMA_KEYS = {
    "id",
    "visit",
    "treatment",
    "outcome",
    "censor",
    "tv_covariates",
    "static_covariates",
    "delimiter",
}
_WEIGHT_KEYS = {
    "denominator_covariates",
    "numerator_covariates",
    "stratify_by_prev_treatment",
    "censoring",
    "truncate_percentiles",
}
_MSM_KEYS = {
    "visit_term",
    "trial_term",
    "treatment_term",
    "baseline_covariates",
    "extra_interactions",
}
_RESAMPLE_KEYS = {"n_boot", "n_draws", "seed"}
_TOP_KEYS = {"schema", "weights", "msm", "target_trial", "resample", "methods", "threads"}


def _check_keys(section: dict, allowed: set, path: str) -> None:
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) at {path}: {', '.join(sorted(unknown))}")


def _tup(value) -> tuple:
    if value is None:
        return ()
    if isinstance(value, (list, tuple)):
        return tuple(value)
    raise ConfigError(f"expected a list, got {type(value).__name__}")


def load_config(path: str | Path) -> Config:
    raw = yaml.safe_load(Path(path).read_text())
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    _check_keys(raw, _TOP_KEYS, "top level")

    sch = raw.get("schema", {}) or {}
    _check_keys(sch, _SCHEMA_KEYS, "schema")
    schema = Schema(
        id=sch.get("id", "id"),
        visit=sch.get("visit", "visit"),
        treatment=sch.get("treatment", "treatment"),
        outcome=sch.get("outcome", "outcome"),
        censor=sch.get("censor", "censored"),
        tv_covariates=_tup(sch.get("tv_covariates")),
        static_covariates=_tup(sch.get("static_covariates")),
        delimiter=sch.get("delimiter", ","),
    )

    wsec = raw.get("weights", {}) or {}
    _check_keys(wsec, _WEIGHT_KEYS, "weights")
    trunc = wsec.get("truncate_percentiles")
    weight_spec = WeightModelSpec(
        denominator_covariates=_tup(wsec.get("denominator_covariates")),
        numerator_covariates=_tup(wsec.get("numerator_covariates")),
        stratify_by_prev_treatment=bool(wsec.get("stratify_by_prev_treatment", True)),
        censoring=bool(wsec.get("censoring", True)),
        truncate_percentiles=tuple(trunc) if trunc else None,
    )

    msec = raw.get("msm", {}) or {}
    _check_keys(msec, _MSM_KEYS, "msm")
    msm_spec = MsmSpec(
        visit_term=msec.get("visit_term", "factor"),
        trial_term=msec.get("trial_term", "none"),
        treatment_term=msec.get("treatment_term", "by_visit"),
        baseline_covariates=_tup(msec.get("baseline_covariates")),
        extra_interactions=tuple(tuple(p) for p in msec.get("extra_interactions", [])),
    )

    rsec = raw.get("resample", {}) or {}
    _check_keys(rsec, _RESAMPLE_KEYS, "resample")
    resample = ResamplePlan(
        n_boot=int(rsec.get("n_boot", 500)),
        n_draws=int(rsec.get("n_draws", 500)),
        seed=int(rsec.get("seed", 0)),
    )

    methods = _tup(raw.get("methods")) or ("sandwich",)
    return Config(
        schema=schema,
        pipeline=PipelineSpec(
            weight_spec=weight_spec,
            msm_spec=msm_spec,
            target_trial=int(raw.get("target_trial", 0)),
        ),
        resample=resample,
        methods=tuple(str(m) for m in methods),
        threads=int(raw.get("threads", 1)),
    )
