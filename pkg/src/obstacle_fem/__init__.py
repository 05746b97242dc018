"""Finite element solvers for the obstacle problem with Lagrange multipliers.

Mixed (bubble-enriched) and residual-stabilized discretizations, primal-dual
active set solvers, a Nitsche/penalty iteration, residual a posteriori
estimators with adaptive bisection refinement, and a radially symmetric
benchmark with known solution.
"""

__version__ = "0.1.0"

from .assembly import (
    ProblemData,
    assemble_mixed,
    assemble_stabilized,
    condensed_bubble_alpha,
    default_alpha,
    inverse_constant,
)
from .benchmark import (
    ExactSolution,
    MethodSpec,
    adaptive_study,
    build_exact_solution,
    convergence_study,
    error_h1,
    error_lambda_neg,
    infsup_diagnostic,
    problem_data,
)
from .estimator import estimate, local_indicator, mark, oscillation
from .fespace import MULTIPLIER_SPACE, Family, SpaceSpec, displacement_space
from .mesh import Mesh, generate_disk_mesh, refine_adaptive, refine_uniform
from .solver import DiscreteSolution, SolverReport, kkt_check, nitsche_solve, pdas_mixed, pdas_stabilized
