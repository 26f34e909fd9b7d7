"""Deep equilibrium linear models: gradient flow, convergence certificates and trust-region views."""

from .datagen import GenSpec, gen_gaussian_negation, gen_teacher_delm, gen_uniform_negation
from .dynamics import (
    FlowConfig,
    SpectralCertificate,
    Trajectory,
    baseline_linear_flow,
    d_matrix,
    flow_integrate,
    induced_dynamics_residual,
    initialize,
    spectral_certificate,
    time_to_accuracy,
)
from .equilibrium import (
    EquilibriumSolveReport,
    ModelParams,
    column_softmax,
    equilibrium_solve,
    forward,
    resolvent,
    softmax_column_jacobian,
)
from .estimator import DELMClassifier, DELMRegressor
from .exceptions import (
    DeqflowError,
    DivergenceError,
    InvalidInputError,
    NonConvergenceError,
    PreconditionError,
    UnsupportedConfigurationError,
)
from .gradients import GradCheckReport, GradientPair, grad_closed_form, grad_finite_diff, grad_ift, gradcheck
from .losses import (
    Dataset,
    LossSpec,
    PLCertificate,
    constrained_min_l0,
    global_min_l0,
    l0_gradient,
    l0_hessian,
    l0_value,
    pl_constant,
)
from .trust_region import (
    BiasDecomposition,
    TrustRegionCertificate,
    certify_theorem2,
    delta_bar_search,
    f_matrix,
    g_matrix,
    implicit_bias_decompose,
    implicit_bias_sweep,
    s_matrix,
)

__version__ = "0.1.0"
