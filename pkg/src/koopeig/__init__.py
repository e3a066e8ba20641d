"""Dictionary-free Koopman eigenfunction identification and control toolkit.

Workflow: simulate grid ensembles of autonomous trajectories, project them
onto mode-weighted exponential bases to obtain eigenfunction samples, search
eigenvalue space against a joint temporal + Koopman-PDE cost, refine the
eigenfunction fields at high resolution, fit lifted input dynamics, and
design eigenfunction-space tracking LQG controllers.
"""

from ._threads import limit_blas_threads

limit_blas_threads(1)

from .errors import (
    AllocationError,
    ConditioningError,
    ConfigurationError,
    DesignError,
    InsufficientDataError,
    IntegrationOverflowError,
    KoopeigError,
    SolverError,
    StateError,
)
from .systems import (
    DynSystem,
    SimGrid,
    TrajectoryEnsemble,
    get_system,
    heun_step,
    piecewise_constant_input,
    select_subgrid,
    simulate_driven,
    simulate_ensemble,
)
from .spectral import (
    EigenvalueSet,
    ModeMatrix,
    Phi0Matrix,
    build_fundamental_basis,
    build_projection_basis,
    estimate_fundamental_frequency,
    fit_reference_modes,
    project_trajectories,
    project_trajectory,
    reconstruct,
    ridge_gram_solve,
    temporal_cost,
)
from .spatial import (
    EigenfunctionField,
    gradient_central_diff,
    interpolate_field,
    kpde_cost,
    kpde_residual,
    refine_field,
    separatrix_mask,
    smoothing_spline,
)
from .optimizer import (
    CostConfig,
    SearchSpace,
    TotalCost,
    concat_conservative_mode,
    distance_penalty,
    nelder_mead_refine,
    pso_search,
    refine_with_nelder_mead,
    total_cost,
)
from .inputdyn import (
    LiftedInputField,
    SigmoidSurrogate,
    SpectralModel,
    extend_field_with_constant,
    fit_observable_projection,
    fit_sigmoid_surrogate,
    lifted_input_samples,
    predict_lpv,
    sum_mean_absolute_error,
)
from .control import (
    ClosedLoopConfig,
    GainSchedule,
    LqgDesign,
    PiController,
    RiccatiProblem,
    design_kalman,
    design_lqr_grid,
    estimate_noise_covariances,
    pi_baseline,
    simulate_closed_loop,
    solve_care,
    steady_state_targets,
)

__version__ = "0.1.0"
