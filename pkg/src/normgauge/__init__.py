"""Normative models over tabular biological features, with subgroup bias audits.

The pipeline: load or synthesize a cohort, fit per-region warped Bayesian
linear regressions on a reference split, score held-out subjects as
standardized deviations from the predicted norms, then audit those deviations
for residual group structure (group-difference tests and attribute
predictability).
"""

from ._version import __version__
from .audit import (
    GroupSummary,
    ParityReport,
    WelchResult,
    bh_fdr,
    group_difference,
    group_summary,
    parity_report,
    significant_fraction,
)
from .blr import (
    DeviationMatrix,
    Hyperparams,
    NormativeModel,
    OptimizerSettings,
    RegionFitMetrics,
    RegionModel,
    RegionPrediction,
    deviations,
    explained_variance,
    fit_metrics,
    fit_normative,
    fit_region,
    load_bundle,
    neg_log_evidence,
    neg_log_evidence_grad,
    predict_region,
    save_bundle,
    standardized_log_loss,
)
from .cohort import (
    Cohort,
    CohortSchema,
    LoadReport,
    SplitSpec,
    Subject,
    demographics_summary,
    load_cohort,
    qc_filter,
    save_cohort,
    stratified_split,
)
from .classify import (
    ClassifierConfig,
    ClassifierReport,
    OvrLogisticModel,
    cross_validate,
    decision_scores,
    evaluate_holdout,
    fit_ovr_logistic,
    permutation_null_auc,
    predict,
    roc_points,
    stratified_folds,
)
from .design import (
    BasisConfig,
    DesignMatrix,
    DesignSchema,
    ModelConfig,
    apply_design,
    fit_design,
    spline_basis,
)
from .errors import InputError, NormgaugeError, NumericalError, SchemaError
from .synth import SynthSpec, generate
from .warp import (
    WarpParams,
    warp_derivative,
    warp_forward,
    warp_inverse,
    warp_log_jacobian,
)

__all__ = [name for name in dir() if not name.startswith("_")]
