"""Numerical toolkit for the diffusion limit of a linear Boltzmann equation in a strong magnetic field."""
from __future__ import annotations

from .cell_solvers import (
    CellSolution,
    ExpansionTerms,
    average_A1,
    compute_expansion,
    solve_chi_eta,
    solve_gyration_system,
    solve_qbar,
    solve_qbarbar,
    solve_qeta_cell,
)
from .collision_ops import (
    CollisionKernel,
    CrossSection,
    apply_gain,
    apply_L_eta,
    apply_Q,
    apply_Qbar,
    apply_Qbarbar,
    apply_Qeta,
    apply_Qeta_adjoint,
    apply_S_eta,
    averaged_sigma,
    build_kernel,
    collision_frequency,
    double_averaged_sigma,
    make_cross_section,
)
from .config import RunConfig
from .diffusion_tensor import (
    DiffusionTensor,
    assemble_D_eta,
    d_parallel,
    expansion_tensor,
    relaxation_reference,
)
from .errors import (
    ConvergenceError,
    GridMismatchError,
    MagdiffError,
    PreconditionError,
    SolvabilityError,
    StabilityError,
    ValidationError,
)
from .grid import (
    Distribution,
    VelocityGrid,
    build_grid,
    cyl_average,
    flux,
    gyration,
    mass,
    maxwellian,
    partial_average,
    rotate,
    weighted_inner,
    weighted_norm,
)
from .kinetic_sim import FieldSpec, PhaseField, SpatialGrid, entropy, moments, run, step
from .macro_sim import MacroField, run_macro, step_drift_diffusion, step_guiding_center

__version__ = "0.1.0"
