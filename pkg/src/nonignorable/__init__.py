"""Estimation of a response model and an outcome mean under nonignorable missingness.

The response propensity is ``expit{h(y, beta) + g(u)}`` with ``h`` known up
to beta and ``g`` unknown. Beta is estimated from a working score in which
an arbitrary ``g*`` replaces ``g``; an instrument ``z`` excluded from the
propensity supplies identification. Outcome functionals are then estimated
by imputing nonrespondents under the exponentially tilted respondent law.
"""

from .errors import (
    BootstrapUnstable,
    ConfigurationError,
    DataError,
    DegenerateConditional,
    EmptyNeighborhood,
    MissingOutcomeError,
    NoConvergence,
    NonignorableError,
    NotFitted,
    NumericalError,
    OracleUnavailable,
    SingularJacobian,
)
from .estimator import (
    BetaFit,
    SolverOptions,
    ThetaFit,
    beta_sandwich,
    bootstrap_se,
    estimate_exp_neg_g,
    estimate_theta_mean,
    k_correction,
    solve_beta,
    solve_theta,
    theta_influence_variance,
)
from .kernels import KernelSpec, nw_regress, smoother_matrix
from .model import GFunction, HFamily, ModelSpec, Observation, Sample, expit, propensity
from .moments import (
    NonparametricProvider,
    OracleProvider,
    ParametricProvider,
    inner_moments,
    outer_expect,
)
from .score import ScoreContext, a_star, d_star, efficient_score, estimating_equation
from .simlab import (
    DESIGNS,
    Design,
    MetricsRow,
    generate,
    get_design,
    naive_estimator,
    oracle_estimator,
    run_monte_carlo,
)

__version__ = "0.1.0"
