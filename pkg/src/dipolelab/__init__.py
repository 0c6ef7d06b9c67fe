"""dipolelab: anomalous diffusion by a randomly modulated dipole.

Two cross-validating routes to the same physics: Monte Carlo simulation of
the stochastic dipole process (sde) and Bessel-mode spectral solutions of the
associated Fokker-Planck equation (spectral), plus probability-conservation
repair (unitarity) and Hurst/fractal observables (fractal).
"""

from .sde import (
    DipoleParams,
    RecoveryRule,
    SingularityError,
    Trajectory,
    dipole_velocity,
    ensemble_positions,
    euler_step,
    fp_time,
    radial_step,
    sample_unit_vector,
    simulate_radial_ensemble,
    simulate_trajectory,
    steps_for_fp_time,
)
from .special import (
    ConvergenceWarning,
    QuadratureGrid,
    SpecialFunctionError,
    bessel_j,
    bessel_j_negative,
    build_k_grid,
    hankel_transform,
    integrate_k,
    inverse_hankel_transform,
    legendre_p,
)
from .spectral import (
    AngularMode,
    ConvergenceError,
    EpsilonGreen,
    Green2D,
    Green3D,
    SingularModeError,
    SpectralField,
    boundary_exponent,
    default_grid,
    epsilon_cutoff_ratio,
    fp_residual,
    green_2d,
    green_3d,
    green_epsilon,
    green_spherical,
    op_exact_solution,
    order_nu,
    radial_eigenfunction,
    reflecting_ratio,
    rescale_time,
    solution_from_initial,
    spherical_order,
    spherical_profile,
    zeta,
)
from .unitarity import (
    ProbabilitySeries,
    angular_grid,
    modified_density,
    modified_field,
    modify_series,
    probability_series,
    radial_panel_grid,
    total_probability,
)
from .fractal import (
    HurstSeries,
    MomentSet,
    box_counting,
    cell_probabilities,
    default_mesh_sizes,
    hurst,
    hurst_pipeline,
    latent_fractal_dimension,
    moments,
    multifractal_free_energy,
    variations,
)

__version__ = "0.1.0"
