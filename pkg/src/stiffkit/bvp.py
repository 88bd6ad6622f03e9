"""Two-point boundary value problems by trapezoidal collocation.

The discrete system on a mesh ``t_0 < ... < t_N`` is

    B0 y_0 + B1 y_N - eta = 0
    y_{n+1} - y_n - h_n/2 (f(t_n, y_n) + f(t_{n+1}, y_{n+1})) = 0

solved by damped Newton.  The Jacobian is block bidiagonal plus the boundary
rows; it is factorized with SuperLU.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import ContinuationStall, NewtonError, StiffkitError, UnsolvableBVPError
from .integrate import Mesh, Trajectory
from .problem import BoundaryCondition, Problem, boundary_projection

log = logging.getLogger(__name__)

COLLOCATION = "trapezoidal-collocation"


def _pattern(N: int, m: int):
    """Row/column indices of the collocation Jacobian, in assembly order."""
    bi, bj = np.meshgrid(np.arange(m), np.arange(m), indexing="ij")
    bi, bj = bi.ravel(), bj.ravel()
    rows = [bi, bi]
    cols = [bj, N * m + bj]
    n = np.arange(N)
    r = (m + n[:, None] * m + bi[None, :]).ravel()
    rows += [r, r]
    cols += [(n[:, None] * m + bj[None, :]).ravel(), ((n[:, None] + 1) * m + bj[None, :]).ravel()]
    return np.concatenate(rows), np.concatenate(cols)


def _assemble(nodes, J, bc: BoundaryCondition):
    """Sparse matrix of the linear(ized) collocation equations.

    ``J`` holds the Jacobian at every node, shape ``(N+1, m, m)``.
    """
    N = nodes.size - 1
    m = bc.dim
    h = np.diff(nodes)[:, None, None]
    eye = np.eye(m)
    left = -(eye + 0.5 * h * J[:-1])
    right = eye - 0.5 * h * J[1:]
    data = np.concatenate([bc.B0.ravel(), bc.B1.ravel(), left.ravel(), right.ravel()])
    rows, cols = _pattern(N, m)
    size = (N + 1) * m
    return sp.csc_matrix((data, (rows, cols)), shape=(size, size))


def _factor(A):
    try:
        lu = spla.splu(A)
    except RuntimeError as exc:
        raise UnsolvableBVPError(f"singular collocation matrix: {exc}") from None
    return lu


def solve_linear_collocation(jac_at: Optional[Callable[[float], np.ndarray]], bc: BoundaryCondition,
                             nodes: np.ndarray, data: np.ndarray,
                             J: Optional[np.ndarray] = None) -> np.ndarray:
    """Solve ``y' = J(t) y``, ``B0 y(0) + B1 y(T) = data`` on ``nodes``.

    ``data`` is ``(m,)`` or ``(m, k)``; the result is ``(N+1, m)`` or
    ``(N+1, m, k)``.  This is the discrete solution ``(prod R_i) Q_N^{-1} data``
    written as one well-conditioned linear system.  ``J`` may hold the
    Jacobians at the nodes, in which case ``jac_at`` is not called.
    """
    nodes = np.asarray(nodes, float)
    if J is None:
        J = np.array([jac_at(t) for t in nodes])
    A = _assemble(nodes, J, bc)
    lu = _factor(A)
    data = np.asarray(data, float)
    vector = data.ndim == 1
    D = data[:, None] if vector else data
    m, k = D.shape
    rhs = np.zeros(((nodes.size) * m, k))
    rhs[:m] = D
    with np.errstate(all="ignore"):
        sol = lu.solve(rhs)
    if not np.all(np.isfinite(sol)):
        raise UnsolvableBVPError("collocation solve produced non-finite values")
    sol = sol.reshape(nodes.size, m, k)
    return sol[:, :, 0] if vector else sol


# --------------------------------------------------------------------------
# nonlinear solve


def _eval(problem: Problem, nodes, Y):
    # scalar math functions raise on overflow where numpy would return inf;
    # a trial point outside the domain just gives a non-finite residual
    try:
        return np.array([problem.f(t, y) for t, y in zip(nodes, Y)], dtype=float)
    except (OverflowError, ValueError, ZeroDivisionError):
        return np.full(Y.shape, np.nan)


def _residual(problem: Problem, nodes, Y, F, eta):
    bc = problem.boundary
    h = np.diff(nodes)[:, None]
    r_bc = bc.B0 @ Y[0] + bc.B1 @ Y[-1] - eta
    r_ode = Y[1:] - Y[:-1] - 0.5 * h * (F[:-1] + F[1:])
    return np.concatenate([r_bc, r_ode.ravel()])


def default_guess(problem: Problem, nodes) -> np.ndarray:
    """Linear interpolant between the minimum-norm boundary projections."""
    ya, yb = boundary_projection(problem.boundary, problem.eta)
    s = (np.asarray(nodes) / nodes[-1])[:, None]
    return (1.0 - s) * ya + s * yb


def solve_bvp(problem: Problem, mesh: Mesh, newton_tol: float = 1e-10, max_iters: int = 50,
              guess: Optional[np.ndarray] = None) -> Trajectory:
    """Damped Newton on the collocation equations.

    Stops when ``max|residual| <= newton_tol * (1 + max|Y|)`` or when a full
    Newton step changes ``Y`` by less than that amount.  Backtracking
    halves the step until the residual norm decreases (Armijo with
    ``c = 1e-4``); a damping factor below ``1e-4`` is a stagnation error.
    """
    nodes = mesh.nodes
    if abs(mesh.T - problem.T) > 1e-12 * problem.T:
        raise ValueError(f"mesh ends at {mesh.T}, problem at {problem.T}")
    eta = np.asarray(problem.eta, float)
    Y = default_guess(problem, nodes) if guess is None else np.array(guess, float)
    if Y.shape != (nodes.size, problem.dim):
        raise ValueError(f"guess has shape {Y.shape}, expected {(nodes.size, problem.dim)}")
    F = _eval(problem, nodes, Y)
    r = _residual(problem, nodes, Y, F, eta)
    norm = np.max(np.abs(r))
    small_step = False
    for it in range(max_iters):
        if small_step or norm <= newton_tol * (1.0 + np.max(np.abs(Y))):
            return Trajectory(mesh, Y, F, COLLOCATION, accepted=it)
        J = np.array([problem.jac(t, y) for t, y in zip(nodes, Y)])
        lu = _factor(_assemble(nodes, J, problem.boundary))
        with np.errstate(all="ignore"):
            dY = lu.solve(-r).reshape(Y.shape)
        if not np.all(np.isfinite(dY)):
            raise NewtonError("non-finite Newton update", residual=norm)
        lam = 1.0
        while True:
            Y_new = Y + lam * dY
            with np.errstate(all="ignore"):
                F_new = _eval(problem, nodes, Y_new)
                r_new = _residual(problem, nodes, Y_new, F_new, eta)
            norm_new = np.max(np.abs(r_new)) if np.all(np.isfinite(r_new)) else np.inf
            if norm_new <= (1.0 - 1e-4 * lam) * norm:
                break
            lam *= 0.5
            if lam < 1e-4:
                raise NewtonError(
                    f"Newton stagnated at iteration {it} with residual {norm:.3e}", residual=norm)
        # the residual of a fine mesh cannot drop below roundoff in y_{n+1} - y_n,
        # so a negligible full Newton step also counts as convergence
        small_step = lam == 1.0 and np.max(np.abs(dY)) <= newton_tol * (1.0 + np.max(np.abs(Y_new)))
        Y, F, r, norm = Y_new, F_new, r_new, norm_new
    if small_step or norm <= newton_tol * (1.0 + np.max(np.abs(Y))):
        return Trajectory(mesh, Y, F, COLLOCATION, accepted=max_iters)
    raise NewtonError(f"Newton did not converge in {max_iters} iterations "
                      f"(residual {norm:.3e})", residual=norm)


def interpolate_states(traj: Trajectory, nodes) -> np.ndarray:
    """Piecewise linear transfer of a solution onto new nodes (robust in layers)."""
    t_old = traj.mesh.nodes
    s = np.asarray(nodes) * (t_old[-1] / nodes[-1])
    return np.column_stack([np.interp(s, t_old, traj.states[:, j])
                            for j in range(traj.states.shape[1])])


def _richardson_indicator(coarse: np.ndarray, fine: np.ndarray) -> np.ndarray:
    """Per-interval error indicator from solutions on a mesh and its bisection.

    ``coarse`` is ``(N+1, ...)`` and ``fine`` ``(2N+1, ...)``; errors are
    scaled per component by ``1 + max|component|``.
    """
    N = coarse.shape[0] - 1
    flat_c = coarse.reshape(N + 1, -1)
    flat_f = fine.reshape(2 * N + 1, -1)
    scale = 1.0 + np.max(np.abs(flat_f), axis=0)
    node_err = np.max(np.abs(flat_f[0::2] - flat_c) / scale, axis=1) / 3.0
    return np.maximum(node_err[:-1], node_err[1:])


def refine_marked(nodes: np.ndarray, marked: np.ndarray) -> np.ndarray:
    mids = 0.5 * (nodes[:-1] + nodes[1:])[marked]
    return np.sort(np.concatenate([nodes, mids]))


def defect_indicator(nodes: np.ndarray, Y: np.ndarray, F: np.ndarray,
                     f_mid: Callable[[np.ndarray, np.ndarray], np.ndarray]) -> np.ndarray:
    """Local error indicator ``h_n |u'(m_n) - f(m_n, u(m_n))|`` per interval.

    ``u`` is the cubic Hermite interpolant of the collocation solution and
    ``m_n`` the interval midpoint; ``f_mid(tm, Um)`` evaluates the vector
    field at all midpoints at once.  Components are scaled by ``1 + max|Y|``.
    """
    N = nodes.size - 1
    h = np.diff(nodes).reshape((N,) + (1,) * (Y.ndim - 1))
    Um = 0.5 * (Y[:-1] + Y[1:]) + 0.125 * h * (F[:-1] - F[1:])
    dUm = 1.5 * (Y[1:] - Y[:-1]) / h - 0.25 * (F[:-1] + F[1:])
    tm = 0.5 * (nodes[:-1] + nodes[1:])
    defect = (h * (dUm - f_mid(tm, Um))).reshape(N, -1)
    scale = 1.0 + np.max(np.abs(Y.reshape(N + 1, -1)), axis=0)
    return np.max(np.abs(defect) / scale, axis=1)


def mark_intervals(indicator: np.ndarray, tol: float) -> np.ndarray:
    """Intervals whose local indicator exceeds their share ``tol/N``."""
    marked = indicator > tol / indicator.size
    if not marked.any():
        marked = indicator >= 0.5 * np.max(indicator)
    return marked


def adaptive_collocation(solve: Callable, f_mid: Callable, nodes: np.ndarray, tol: float,
                         max_nodes: int = 400_000, max_rounds: int = 60, label: str = ""):
    """Shared refinement loop.

    ``solve(nodes, previous)`` returns ``(Y, F)`` on ``nodes``; ``previous`` is
    the last ``(nodes, Y)`` pair or None, usable as a warm start.  Each round
    compares the solution with the one on the bisected mesh (Richardson); if
    the difference exceeds ``tol`` the intervals with large local defect are
    bisected.  Returns ``(fine_nodes, Y, F, rounds, error)`` on the last
    bisected mesh.
    """
    Y, F = solve(nodes, None)
    err = np.inf
    for rnd in range(max_rounds):
        fine_nodes = Mesh(nodes).bisect().nodes
        Yf, Ff = solve(fine_nodes, (nodes, Y))
        err = float(np.max(_richardson_indicator(Y, Yf)))
        if err <= tol:
            return fine_nodes, Yf, Ff, rnd + 1, err
        marked = mark_intervals(defect_indicator(nodes, Y, F, f_mid), tol)
        new_nodes = refine_marked(nodes, marked)
        if 2 * new_nodes.size > max_nodes:
            log.warning("mesh limit reached for %s (error %.2e)", label, err)
            return fine_nodes, Yf, Ff, rnd + 1, err
        Y, F = solve(new_nodes, (fine_nodes, Yf))
        nodes = new_nodes
    return fine_nodes, Yf, Ff, max_rounds, err


@dataclass
class AdaptiveSolution:
    trajectory: Trajectory
    rounds: int
    error: float


def _transfer(old_nodes, old_Y, nodes):
    s = np.asarray(nodes) * (old_nodes[-1] / nodes[-1])
    return np.column_stack([np.interp(s, old_nodes, old_Y[:, j]) for j in range(old_Y.shape[1])])


def solve_bvp_adaptive(problem: Problem, mesh: Optional[Mesh] = None, tol: float = 1e-6,
                       guess_traj: Optional[Trajectory] = None, max_nodes: int = 400_000,
                       max_rounds: int = 60, newton_tol: float = 1e-10) -> AdaptiveSolution:
    """Solve on successively refined meshes until the Richardson estimate
    (solution on a mesh against its bisection) is below ``tol`` everywhere.

    Returns the solution on the last bisected mesh.
    """
    mesh = mesh or Mesh.uniform(problem.T, 64)

    def solve(nodes, previous):
        if previous is None:
            guess = None if guess_traj is None else interpolate_states(guess_traj, nodes)
        else:
            guess = _transfer(previous[0], previous[1], nodes)
        tr = solve_bvp(problem, Mesh(nodes), newton_tol=newton_tol, guess=guess)
        return tr.states, tr.derivs

    def f_mid(tm, Um):
        return np.array([problem.f(t, u) for t, u in zip(tm, Um)])

    nodes, Y, F, rounds, err = adaptive_collocation(solve, f_mid, mesh.nodes, tol, max_nodes,
                                                    max_rounds, problem.name)
    return AdaptiveSolution(Trajectory(Mesh(nodes), Y, F, COLLOCATION), rounds, err)


# --------------------------------------------------------------------------
# continuation


def _midpoint(a: float, b: float) -> float:
    if a > 0 and b > 0:
        return math.sqrt(a * b)
    if a < 0 and b < 0:
        return -math.sqrt(a * b)
    return 0.5 * (a + b)


@dataclass
class ContinuationResult:
    values: list
    solutions: list  # Trajectory per requested value (in request order)
    inserted: list  # intermediate values that had to be added


def continue_in_parameter(problem: Problem, param_name: str, values: Sequence[float],
                          mesh_policy: str = "adaptive", mesh: Optional[Mesh] = None,
                          tol: float = 1e-6, max_depth: int = 8,
                          on_solution: Optional[Callable] = None) -> ContinuationResult:
    """Solve along ``values`` (ordered from easy to hard), warm-starting each
    solve from the previous one.

    On failure, intermediate values are inserted by bisection (geometric
    midpoint for same-signed values) up to ``max_depth`` levels.  A stall
    raises ContinuationStall carrying the solutions obtained so far.
    """
    if mesh_policy not in ("adaptive", "fixed"):
        raise ValueError("mesh_policy must be 'adaptive' or 'fixed'")
    values = [float(v) for v in values]
    if len(values) > 1:
        d = np.diff(values)
        if not (np.all(d > 0) or np.all(d < 0)):
            raise ValueError("continuation values must be strictly monotone")
    mesh = mesh or Mesh.uniform(problem.T, 64)

    def solve_at(value, prev):
        p = problem.with_params(**{param_name: value})
        if mesh_policy == "fixed":
            guess = None if prev is None else interpolate_states(prev, mesh.nodes)
            return solve_bvp(p, mesh, guess=guess)
        start = mesh if prev is None else prev.mesh
        return solve_bvp_adaptive(p, start, tol=tol, guess_traj=prev).trajectory

    solutions: list = []
    inserted: list = []
    prev = None
    prev_value = None
    for value in values:
        pending = [(value, 0)]
        while pending:
            target, depth = pending[-1]
            try:
                sol = solve_at(target, prev)
            except (StiffkitError, np.linalg.LinAlgError, FloatingPointError) as exc:
                if prev_value is None or depth >= max_depth:
                    raise ContinuationStall(
                        f"continuation in {param_name} stalled at {target:g}: {exc}",
                        results=solutions, last_value=prev_value) from exc
                mid = _midpoint(prev_value, target)
                inserted.append(mid)
                pending.append((mid, depth + 1))
                continue
            pending.pop()
            prev, prev_value = sol, target
        solutions.append(prev)
        if on_solution is not None:
            on_solution(value, prev)
    return ContinuationResult(values, solutions, inserted)
