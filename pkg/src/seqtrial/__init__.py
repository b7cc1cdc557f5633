"""Sequential trial emulation for survival outcomes.

Expands an observational cohort into a pool of emulated target trials,
estimates stabilised inverse-probability weights, fits a marginal structural
pooled logistic model and standardises marginal risk-difference curves, with
six resampling-based confidence-interval constructors and a Monte Carlo
study harness.
"""

from .datamodel import (
    ObservationalDataset,
    Schema,
    SchemaError,
    StructureError,
    ValidationReport,
    ValueDomainError,
    from_frame,
    load_csv,
    validate,
    write_csv,
)
from .expansion import ExpandedDataset, eligibility, expand, tabulate
from .glm import ConstructionFailure, LogisticFit, fit_weighted_logistic, sandwich_vcov
from .inference import METHODS, CiResult, compute_ci
from .msm import MrdCurve, MsmFit, MsmSpec, estimate_mrd, fit_msm
from .pipeline import PipelineFailure, PipelineResult, PipelineSpec, run_pipeline
from .simulation import Scenario, generate, scenario_grid, true_mrd
from .study import (
    StudySettings,
    default_pipeline_spec,
    required_simulations,
    run_study,
)
from .weights import (
    WeightedExpansion,
    WeightModels,
    WeightModelSpec,
    compute_weights,
    fit_weight_models,
    weight_summary,
)

__version__ = "0.1.0"

__all__ = [
    "CiResult",
    "ConstructionFailure",
    "ExpandedDataset",
    "LogisticFit",
    "METHODS",
    "MrdCurve",
    "MsmFit",
    "MsmSpec",
    "ObservationalDataset",
    "PipelineFailure",
    "PipelineResult",
    "PipelineSpec",
    "Scenario",
    "Schema",
    "SchemaError",
    "StructureError",
    "StudySettings",
    "ValidationReport",
    "ValueDomainError",
    "WeightModelSpec",
    "WeightModels",
    "WeightedExpansion",
    "compute_ci",
    "compute_weights",
    "default_pipeline_spec",
    "eligibility",
    "estimate_mrd",
    "expand",
    "fit_msm",
    "fit_weight_models",
    "fit_weighted_logistic",
    "from_frame",
    "generate",
    "load_csv",
    "required_simulations",
    "run_pipeline",
    "run_study",
    "sandwich_vcov",
    "scenario_grid",
    "tabulate",
    "true_mrd",
    "validate",
    "weight_summary",
    "write_csv",
    "__version__",
]
