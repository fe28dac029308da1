"""Robust treatment-effect estimation for platform trials with constrained randomization.

The workflow runs design -> dataset -> analysis set -> working model ->
estimator -> variance.  Each stage lives in its own module; the names
most analyses need are re-exported here.
"""

from .analysis_set import (
    AnalysisSet,
    Selector,
    StrataPartition,
    build_ece,
    build_restricted,
    build_strata,
    empirical_weights,
)
from .dataset import ColumnMap, Dataset, ParticipantRecord, load_records, parse_column_map
from .design import (
    AssignmentSchedule,
    DesignError,
    TrialDesign,
    ZKey,
    compile_schedule,
    parse_design,
    serialize_design,
    validate_schedule,
)
from .errors import (
    ConfigError,
    DegenerateArmError,
    DegenerateVarianceError,
    EceTrialError,
    EmptyEceError,
    InsufficientDataError,
    ParseError,
    PositivityError,
    SchemaError,
)
from .estimators import (
    METHODS,
    PairEstimate,
    estimate_aipw,
    estimate_aps,
    estimate_ipw,
    estimate_naive,
    estimate_ps,
    estimate_saipw,
    estimate_sipw,
)
from .variance import (
    ContrastInference,
    CovarianceEstimate,
    contrast_inference,
    cov_aipw,
    cov_aps,
    cov_ipw,
    cov_naive,
    cov_ps,
    cov_saipw,
    cov_sipw,
)
from .working_model import (
    CovariateSpec,
    FittedModel,
    center_model,
    check_adjustment_conditions,
    constant_model,
    fit_anhecova,
    fit_linear,
)

__version__ = "0.1.0"
