"""Numerical laboratory for singular interacting-particle flows: first and
second order particle dynamics, grid and closed-form mean-field transport,
and modulated-energy diagnostics tying the two together."""

from .dynamics import (
    FLOW_KINDS,
    FlowSpec,
    IntegratorConfig,
    StepSizeError,
    default_J,
    make_forcing,
    run,
    step,
)
from .harness import (
    ConfigError,
    apply_overrides,
    config_hash,
    diagnose_records,
    initial_system,
    load_config,
    quantized_positions,
    read_records_csv,
    record_times,
    run_cell,
    run_gap_experiment,
    run_pde,
    run_sweep,
)
from .kernel import (
    KernelSingularityError,
    KernelSpec,
    ball_volume,
    eval_f_eta,
    eval_g,
    eval_g_eta,
    eval_grad_g,
    integral_f_eta,
    sphere_area,
)
from .meanfield import (
    CFLError,
    EXACT_FAMILIES,
    INTERACTION_CLOCK,
    EulerPoissonSolver,
    ExactSolution,
    ExtrapolationError,
    FieldBounds,
    MeasureGrid,
    ShockError,
    VelocityGrid,
    advance_density,
    density_at,
    evolve_conservative,
    evolve_dissipative,
    evolve_euler_poisson,
    exact_at,
    field_bounds,
    grad_potential,
    load_grid,
    potential,
    save_grid,
    velocity,
    velocity_jacobian_sup,
)
from .modenergy import (
    CSV_COLUMNS,
    BalanceReport,
    DiagnosticsRecord,
    OutOfRegimeError,
    RateFit,
    TruncatedEnergy,
    bounded_lipschitz_distance,
    compute_record,
    euler_poisson_gap,
    f1_balance_check,
    fit_rate,
    modulated_energy,
    monokinetic_energy,
    self_energy,
    truncated_energy,
    weak_strong_gap,
)
from .particles import (
    CollisionError,
    ParticleSystem,
    interaction_energy,
    kinetic_energy,
    minimal_distances,
    newton_energy,
    pairwise_force,
    particle_rng,
)

__version__ = "0.1.0"
