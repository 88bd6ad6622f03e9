"""stiffkit: stiffness of ODE problems measured by conditioning.

The stiffness ratio ``sigma = kappa / gamma`` compares the largest response
of a problem to a perturbation of its data with the average response over the
interval.  See :func:`stiffkit.analysis.analyze` for the main entry point.
"""

from .analysis import AnalysisOptions, analyze, check_discrete
from .conditioning import ConditioningReport, DirectionSet, well_represented
from .integrate import Mesh, integrate_adaptive, integrate_fixed
from .problem import BoundaryCondition, Problem, ProblemSpec, build_problem, load_spec
from .suite import builtin, linear_problem, load_case, run_sweep

__version__ = "0.1.0"

__all__ = [
    "AnalysisOptions", "BoundaryCondition", "ConditioningReport", "DirectionSet", "Mesh",
    "Problem", "ProblemSpec", "analyze", "build_problem", "builtin", "check_discrete",
    "integrate_adaptive", "integrate_fixed", "linear_problem", "load_case", "load_spec",
    "run_sweep", "well_represented",
]
