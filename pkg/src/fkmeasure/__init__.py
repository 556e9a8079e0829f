"""Feynman-Kac solvers for parabolic problems with measure data on finite grids."""

from .grid import (GridError, SpaceTimeField, SpaceTimeGrid, box_grid, interval_grid, m_inner,
                   point_grid, spacetime_inner, spacetime_l1)
from .operators import (GeneratorFamily, OperatorError, adjoint, bilinear_form,
                        divergence_form_generator, fractional_generator, from_matrices,
                        structural_report, zero_generator)
from .measures import MeasureData, MeasureError, RevuzRates, classify, to_revuz_rates, total_variation
from .linear import (LinearProblem, SolveResult, adjoint_resolvent, check_delta_condition,
                     check_duality, check_weak_form, resolvent, solve_backward, solve_fk_mc)
from .process import PathSample, accumulate, estimate_capacity, sample_path
from .semilinear import (Driver, check_comparison, cubic_driver, linear_driver, martingale_residual,
                         reconstruct_bsde, saturating_driver, solve_semilinear)
from .estimates import energy_estimate, l1_estimate, mollify, truncate, tv_domination
from .scenarios import Scenario, ScenarioError, load_scenario

__version__ = "0.1.0"

__all__ = [
    "GridError", "SpaceTimeField", "SpaceTimeGrid", "box_grid", "interval_grid", "m_inner",
    "point_grid", "spacetime_inner", "spacetime_l1",
    "GeneratorFamily", "OperatorError", "adjoint", "bilinear_form", "divergence_form_generator",
    "fractional_generator", "from_matrices", "structural_report", "zero_generator",
    "MeasureData", "MeasureError", "RevuzRates", "classify", "to_revuz_rates", "total_variation",
    "LinearProblem", "SolveResult", "adjoint_resolvent", "check_delta_condition", "check_duality",
    "check_weak_form", "resolvent", "solve_backward", "solve_fk_mc",
    "PathSample", "accumulate", "estimate_capacity", "sample_path",
    "Driver", "check_comparison", "cubic_driver", "linear_driver", "martingale_residual",
    "reconstruct_bsde", "saturating_driver", "solve_semilinear",
    "energy_estimate", "l1_estimate", "mollify", "truncate", "tv_domination",
    "Scenario", "ScenarioError", "load_scenario",
]
