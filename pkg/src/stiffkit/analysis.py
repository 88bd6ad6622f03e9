"""End-to-end conditioning analysis of a Problem."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import conditioning as cond
from .bvp import continue_in_parameter, solve_bvp_adaptive
from .errors import StiffkitError
from .integrate import METHODS, ADAPTIVE_STIFF, MethodSpec, Mesh, Trajectory, integrate_adaptive, integrate_fixed
from .problem import Problem
from .suite import continuation_path
from .variational import FundamentalPath, discrete_bvp_responses, propagate_fundamental


@dataclass
class AnalysisOptions:
    norm: str = "inf"
    threshold: float = cond.STIFF_THRESHOLD
    kappa_threshold: float = cond.KAPPA_THRESHOLD
    seed: Optional[int] = None
    directions: int = cond.DEFAULT_RANDOM_DIRECTIONS
    rtol: float = 1e-8
    atol: float = 1e-10
    variational_rtol: float = 1e-9
    variational_atol: float = 1e-12
    bvp_tol: float = 1e-6
    hill_climb: bool = True


@dataclass
class Analysis:
    problem: Problem
    trajectory: Optional[Trajectory]
    path: FundamentalPath
    report: cond.ConditioningReport
    directions: cond.DirectionSet = field(repr=False, default=None)


def reference_solution(problem: Problem, options: AnalysisOptions = AnalysisOptions()) -> Optional[Trajectory]:
    """Nominal solution, or None for linear problems (whose linearization
    does not depend on it).  Built-in boundary value problems that defeat a
    direct solve are reached by continuation from their easy end."""
    if problem.linear is not None:
        return None
    if problem.is_ivp:
        traj, _ = integrate_adaptive(problem, rtol=options.rtol, atol=options.atol)
        return traj
    try:
        return solve_bvp_adaptive(problem, tol=options.bvp_tol).trajectory
    except StiffkitError:
        route = continuation_path(problem)
        if route is None:
            raise
    param, values = route
    start = problem.with_params(**{param: values[0]})
    return continue_in_parameter(start, param, values, tol=options.bvp_tol).solutions[-1]


def directions_for(problem: Problem, path: FundamentalPath, options: AnalysisOptions) -> cond.DirectionSet:
    user = list(problem.perturbations)
    if problem.is_ivp and problem.eta is not None:
        user.append(problem.eta)
    return cond.DirectionSet.build(problem.dim, random=options.directions, seed=options.seed,
                                   jac0=path.jac0, user=user, norm=options.norm)


def analyze(problem: Problem, options: AnalysisOptions = AnalysisOptions(),
            trajectory: Optional[Trajectory] = None) -> Analysis:
    """Conditioning report of ``problem``.

    ``trajectory`` may supply a precomputed nominal solution (for example
    from parameter continuation).
    """
    if trajectory is None:
        trajectory = reference_solution(problem, options)
    path = propagate_fundamental(problem, trajectory, rtol=options.variational_rtol,
                                 atol=options.variational_atol, bvp_tol=options.bvp_tol)
    directions = directions_for(problem, path, options)
    report = cond.maximize_sigma(path, directions, hill_climb=options.hill_climb,
                                 threshold=options.threshold,
                                 kappa_threshold=options.kappa_threshold)
    report.problem = problem.name
    report.dichotomy = cond.check_dichotomy(path.jac0, problem.boundary,
                                            frozen=problem.linear is None or not problem.linear.constant)
    return Analysis(problem, trajectory, path, report, directions)


@dataclass
class DiscreteCheck:
    kappa_c: float
    gamma_c: float
    discrete: cond.DiscreteResult
    verdict: cond.Verdict
    eta: np.ndarray
    method: str
    N: int
    dichotomy: Optional[cond.DichotomyReport] = None


def discrete_states(problem: Problem, method: str, mesh: Mesh, eta: np.ndarray,
                    trajectory: Optional[Trajectory] = None) -> tuple[np.ndarray, Optional[np.ndarray]]:
    """Discrete response ``y_0..y_N`` to the perturbation ``eta`` and, for
    initial value problems, the step matrices ``R_n``."""
    eta = np.asarray(eta, dtype=float)
    if problem.is_ivp:
        _, stepmap = integrate_fixed(MethodSpec(method), problem, mesh)
        R = stepmap.matrices
        Y = np.empty((mesh.nodes.size, problem.dim))
        Y[0] = eta
        with np.errstate(over="ignore", invalid="ignore"):
            for n in range(R.shape[0]):
                Y[n + 1] = R[n] @ Y[n]
        return Y, R
    return discrete_bvp_responses(problem, trajectory, mesh.nodes) @ eta, None


def check_discrete(problem: Problem, method: str, mesh: Mesh,
                   options: AnalysisOptions = AnalysisOptions(), tol_factor: float = 2.0,
                   eta: Optional[np.ndarray] = None) -> DiscreteCheck:
    """Compare the discrete parameters of ``method`` on ``mesh`` with the
    continuous ones, both for the direction ``eta`` (default: the maximizing
    direction of the continuous analysis)."""
    if method not in METHODS or method == ADAPTIVE_STIFF:
        raise ValueError(f"method must be one of {', '.join(METHODS[:3])}")
    if not problem.is_ivp and method != "trapezoidal":
        raise ValueError("boundary value problems are discretized by trapezoidal collocation")
    analysis = analyze(problem, options)
    eta = analysis.report.eta_star if eta is None else np.asarray(eta, dtype=float)
    kappa_c, gamma_c = cond.kappa_gamma_continuous(analysis.path, eta, options.norm)
    Y, R = discrete_states(problem, method, mesh, eta, analysis.trajectory)
    disc = cond.kappa_gamma_discrete(Y, mesh, eta, options.norm)
    verdict = cond.well_represented(kappa_c, gamma_c, disc.kappa, disc.gamma, tol_factor)
    dich = None if R is None else cond.check_dichotomy_discrete(R, problem.boundary)
    return DiscreteCheck(kappa_c, gamma_c, disc, verdict, eta, method, mesh.N, dich)
