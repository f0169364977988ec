"""Joint Bayesian risk prediction for two correlated binary outcomes.

Library layout: ``data`` (ingest/validate/scale/fold), ``model`` (priors and
log posterior), ``sampler`` (dynamic HMC), ``quadrature``/``predict``
(marginal risk), ``evaluate`` (selection, metrics, CV, recalibration),
``simulate`` (joint-vs-univariate experiment), ``cli`` (command line).
"""

__version__ = "0.1.0"

from .data import (  # noqa: F401
    GROUPS,
    OUTCOMES,
    STRUCTURAL_ZEROS,
    DataError,
    Dataset,
    Participant,
    PredictorSpec,
    Schema,
    load_dataset,
    normalize_weights,
    scale_predictors,
    stratified_folds,
    write_dataset,
)
from .model import (  # noqa: F401
    JointModel,
    ModelError,
    PriorConfig,
    SubModelSpec,
    default_joint_spec,
    linear_predictor,
    pooled_outcome_model,
)
from .quadrature import QuadratureRule, gauss_hermite, marginal_probability  # noqa: F401
from .sampler import (  # noqa: F401
    PosteriorDraws,
    SamplerConfig,
    SamplerError,
    diagnostics,
    initialize,
    sample,
)
