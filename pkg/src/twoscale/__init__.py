"""Numerical toolkit for coupled slow-fast diffusions.

Simulates the pair (slow state in R^n, fast state in R^l) driven by shared
Wiener noise on two time scales, computes stationary structure of the fast
variable, solves the weighted elliptic cell problems behind the
large-deviation rate of the pair (path, occupation flow), and verifies the
rate against direct Monte Carlo decay estimates.
"""

__version__ = "0.1.0"

from .grids import Grid1D, Grid2D, GradientField, box_grid, default_fast_grid
from .model import (CoefficientSet, ConditionReport, DerivedCoefficients,
                    Dimensions, FrozenFast, PRESETS, SamplingLattice,
                    check_conditions, derive, preset)
from .paths import Path
from .flows import DensityFlow, constant_flow, gaussian_flow, gaussian_slices
from .stationary import (InvariantDensity, NumericalError, ZeroCostPair,
                         invariant_density_1d, invariant_density_grid,
                         zero_cost_path)
from .poisson import (CellSolution, ProjectionResult, project, q_matrix,
                      refinement_check, solve_cell, solve_phi, solve_psi)
from .rate import (CellCache, ProjectedRateResult, RateBreakdown,
                   RateSupResult, SplineBasis, cutoff_sensitivity,
                   drift_mismatch, psd_pinv, rate_closed_form,
                   rate_density_slice, rate_projected_slow, rate_sup_form)
from .simulate import (OccupationMeasure, SimBatch, SimConfig,
                       occupation_to_csv, path_to_csv, simulate_batch,
                       simulate_frozen_fast, simulate_path, tilted_drift)
from .verify import (DecayEstimate, EventSpec, MinimizedPair, PhiCheckReport,
                     bounded_lipschitz_distance, decay_to_csv, estimate_H,
                     h_variational, hat_functions, mc_decay, minimize_rate,
                     occupation_lln_ladder, phi_mc_crosscheck,
                     wilson_interval)

__all__ = [
    "Grid1D", "Grid2D", "GradientField", "box_grid", "default_fast_grid",
    "CoefficientSet", "ConditionReport", "DerivedCoefficients", "Dimensions",
    "FrozenFast", "PRESETS", "SamplingLattice", "check_conditions", "derive",
    "preset", "Path",
    "DensityFlow", "constant_flow", "gaussian_flow", "gaussian_slices",
    "InvariantDensity", "NumericalError", "ZeroCostPair",
    "invariant_density_1d", "invariant_density_grid", "zero_cost_path",
    "CellSolution", "ProjectionResult", "project", "q_matrix",
    "refinement_check", "solve_cell", "solve_phi", "solve_psi",
    "CellCache", "ProjectedRateResult", "RateBreakdown", "RateSupResult",
    "SplineBasis", "cutoff_sensitivity", "drift_mismatch", "psd_pinv",
    "rate_closed_form", "rate_density_slice", "rate_projected_slow",
    "OccupationMeasure", "SimBatch", "SimConfig", "occupation_to_csv",
    "path_to_csv", "simulate_batch", "simulate_frozen_fast", "simulate_path",
    "tilted_drift",
    "DecayEstimate", "EventSpec", "MinimizedPair", "PhiCheckReport",
    "bounded_lipschitz_distance", "decay_to_csv", "estimate_H",
    "h_variational", "hat_functions", "mc_decay", "minimize_rate",
    "occupation_lln_ladder", "phi_mc_crosscheck", "wilson_interval",
    "rate_sup_form", "__version__",
]
