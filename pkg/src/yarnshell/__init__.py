"""Yarn-to-shell homogenization pipeline.

Simulates periodic yarn-level cloth patches under sampled surface
deformations, fits orthotropic thin-shell stiffness to the recorded energy
densities, and validates the fitted parameters in shell-level stretch and
drape experiments.
"""

from .embedding import (
    DeformationSample,
    SamplingConfig,
    SurfaceEmbedding,
    embed_surface,
    sample_deformation_grid,
)
from .errors import (
    ConfigError,
    ContactError,
    ConvergenceError,
    DegenerateElementError,
    InvalidInputError,
    InvalidModuliError,
    InvalidSampleError,
    PatternLoadError,
    SingularConfigurationError,
    StageDependencyError,
    UnderdeterminedFitError,
    YarnShellError,
)
from .fitter import FitConfig, design_row, estimate_thickness, fit
from .homogenize import (
    EnergyRecord,
    homogenize_sample,
    read_energy_records,
    run_homogenization,
    write_energy_records,
)
from .pattern import (
    MaterialSpec,
    YarnPattern,
    builtin_material,
    estimate_yarn_radius,
    load_material,
    load_pattern,
    save_pattern,
    tile_pattern,
)
from .rod import RodState
from .shell import (
    ShellParams,
    TriangleShellMesh,
    bending_constraint,
    first_form,
    first_forms,
    flat_swatch_mesh,
    membrane_constraint,
    second_form,
    second_forms,
    shell_energy,
    stiffness_from_moduli,
)
from .shellsim import boundary_force, drape_test, solve_equilibrium, stretch_test
from .solver import PatchMinimizer, SolverConfig, relax_patch
from .weaves import BUILTIN_PATTERNS, plain_weave, satin, twill

__version__ = "0.1.0"
