"""Penalization schemes for BSDEs with constraints on (Y, Z): Monte Carlo,
Markov-chain and finite-difference solvers with convergence diagnostics."""

from .analysis import (ConvergenceReport, ResidualReport, SweepResources, dominance_check,
                       penalization_sweep, skorohod_flatness, supersolution_family_residual,
                       viscosity_residual)
from .bsde import (PenalizedBsdeSolution, RegressionBasis, increasing_part_stats,
                   solve_penalized_chain, solve_penalized_lsmc)
from .pde import (FdScheme, closed_form_linear, refine_study, solve_penalized_fd,
                  solve_projected_obstacle_fd)
from .problem import CATALOG, CoefficientSet, ValidationReport, builtin_problem, validate_problem
from .sde import (ChainDiscretization, PathEnsemble, TimeGrid, build_chain, load_ensemble,
                  save_ensemble, simulate_paths)
from .surface import ValueSurface, read_surface, write_surface

__version__ = "0.1.0"

__all__ = [
    "CATALOG", "ChainDiscretization", "CoefficientSet", "ConvergenceReport", "FdScheme",
    "PathEnsemble", "PenalizedBsdeSolution", "RegressionBasis", "ResidualReport", "SweepResources",
    "TimeGrid", "ValidationReport", "ValueSurface", "build_chain", "builtin_problem",
    "closed_form_linear", "dominance_check", "increasing_part_stats", "load_ensemble",
    "penalization_sweep", "read_surface", "refine_study", "save_ensemble", "simulate_paths",
    "skorohod_flatness", "solve_penalized_chain", "solve_penalized_fd", "solve_penalized_lsmc",
    "solve_projected_obstacle_fd", "supersolution_family_residual", "validate_problem",
    "viscosity_residual", "write_surface",
]
