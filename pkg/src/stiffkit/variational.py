"""Linearization along a reference solution and the fundamental matrix.

For initial value problems the variational equation ``Phi' = J(t) Phi``,
``Phi(0) = I`` is integrated with the adaptive stiff integrator, stopping at
every node of the reference trajectory.

For boundary value problems ``Phi(t)`` itself is typically not representable
(the growing modes of a dichotomic problem overflow), so the path stores
``Psi(t) = Phi(t) Q^{-1}`` directly: its columns solve the linearized BVP with
boundary data ``e_j``, computed by collocation on a refined mesh.  ``Q`` is then
recovered as ``Psi(0)^{-1}`` when finite.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import bvp as _bvp
from .errors import DomainError, UnsolvableBVPError
from .integrate import LinearSystem, Mesh, Trajectory, hermite, solve_adaptive
from .problem import Problem

BVP_CONDITION_LIMIT = 1e14



def jacobian_along(problem: Problem, trajectory: Optional[Trajectory], t: float) -> np.ndarray:
    """``df/dy`` at ``(t, ybar(t))``; the trajectory is not needed for linear problems."""
    if problem.linear is not None:
        return np.asarray(problem.linear.A(t), dtype=float)
    if trajectory is None:
        raise ValueError(f"problem {problem.name!r} is nonlinear: a reference trajectory is required")
    return problem.jac(t, trajectory(t))


def jacobians_along(problem: Problem, trajectory: Optional[Trajectory], ts) -> np.ndarray:
    """``jacobian_along`` at every time in ``ts``, shape ``(n, m, m)``."""
    ts = np.clip(np.asarray(ts, dtype=float), 0.0, problem.T)
    if problem.linear is not None:
        if problem.linear.constant:
            A = np.asarray(problem.linear.A(0.0), dtype=float)
            return np.broadcast_to(A, (ts.size,) + A.shape).copy()
        return np.array([problem.linear.A(t) for t in ts], dtype=float)
    if trajectory is None:
        raise ValueError(f"problem {problem.name!r} is nonlinear: a reference trajectory is required")
    Y = trajectory(ts)
    return np.array([problem.jac(t, y) for t, y in zip(ts, Y)])


@dataclass
class FundamentalPath:
    """Samples of ``Psi(t) = Phi(t) Q^{-1}`` with Hermite dense output.

    ``psi_nodes``/``dpsi_nodes`` have shape ``(n, m, m)``.  ``Q`` is None when
    it is not representable in floating point.
    """

    times: np.ndarray
    psi_nodes: np.ndarray
    dpsi_nodes: np.ndarray
    Q: Optional[np.ndarray]
    Q_inverse_norm: float
    kind: str = "ivp"
    jac0: Optional[np.ndarray] = None  # Jacobian at t=0 on the nominal solution
    frozen_jacobians: Optional[np.ndarray] = None  # J at each node
    mesh_nodes: int = 0
    q_condition: float = 1.0

    @property
    def T(self) -> float:
        return float(self.times[-1])

    @property
    def dim(self) -> int:
        return self.psi_nodes.shape[1]

    @property
    def mesh(self) -> Mesh:
        return Mesh(self.times)

    def psi(self, t) -> np.ndarray:
        return hermite(self.times, self.psi_nodes, self.dpsi_nodes, t)

    def phi(self, t) -> np.ndarray:
        """Fundamental matrix with ``Phi(0) = I`` (may overflow for BVPs)."""
        if self.Q is None:
            raise UnsolvableBVPError("Q is not representable for this problem")
        with np.errstate(all="ignore"):
            return self.psi(t) @ self.Q

    @property
    def phi_nodes(self) -> np.ndarray:
        if self.Q is None:
            raise UnsolvableBVPError("Q is not representable for this problem")
        with np.errstate(all="ignore"):
            return self.psi_nodes @ self.Q

    def grid(self, level: int, start: int = 0, stop: Optional[int] = None):
        """Times and Psi values on intervals ``start..stop-1`` refined
        ``2**level`` times (right endpoint included)."""
        stop = self.times.size - 1 if stop is None else stop
        k = 2 ** level
        nodes = self.times
        idx = np.repeat(np.arange(start, stop), k)
        s = np.tile(np.arange(k) / k, stop - start)
        ts = np.append(nodes[idx] + (nodes[idx + 1] - nodes[idx]) * s, nodes[stop])
        vals = _hermite_known(nodes, self.psi_nodes, self.dpsi_nodes, idx, s)
        vals = np.concatenate([vals, self.psi_nodes[stop:stop + 1]], axis=0)
        return ts, vals

    def iter_grid(self, level: int, max_points: int = 1 << 18):
        """``grid(level)`` in consecutive chunks sharing their end points."""
        n = self.times.size - 1
        step = max(1, max_points >> level)
        for start in range(0, n, step):
            yield self.grid(level, start, min(n, start + step))

    def to_csv(self, path_or_buf) -> None:
        from .export import write_csv

        m = self.dim
        phi = self.phi_nodes
        header = ["t"] + [f"phi{i + 1}{j + 1}" for i in range(m) for j in range(m)]
        rows = [[t, *P.ravel()] for t, P in zip(self.times, phi)]
        write_csv(path_or_buf, header, rows)


def _hermite_known(nodes, values, derivs, idx, s):
    h = (nodes[idx + 1] - nodes[idx])[:, None, None]
    s = s[:, None, None]
    s2, s3 = s * s, s * s * s
    return ((2 * s3 - 3 * s2 + 1) * values[idx] + (s3 - 2 * s2 + s) * h * derivs[idx]
            + (-2 * s3 + 3 * s2) * values[idx + 1] + (s3 - s2) * h * derivs[idx + 1])


def propagate_fundamental(problem: Problem, trajectory: Optional[Trajectory] = None,
                          rtol: float = 1e-11, atol: float = 1e-14,
                          bvp_tol: float = 1e-6) -> FundamentalPath:
    """Fundamental path of the problem linearized along ``trajectory``."""
    if problem.is_ivp:
        return _propagate_ivp(problem, trajectory, rtol, atol)
    return _propagate_bvp(problem, trajectory, bvp_tol)


def _propagate_ivp(problem, trajectory, rtol, atol) -> FundamentalPath:
    m = problem.dim
    system = LinearSystem(lambda t: jacobian_along(problem, trajectory, t), m)
    breakpoints = None if trajectory is None else trajectory.mesh.nodes
    res = solve_adaptive(system, problem.T, np.eye(m), rtol, atol,
                         breakpoints=breakpoints, want_R=False)
    times = res.times
    phi = res.states
    phi[0] = np.eye(m)
    dphi = res.derivs
    return FundamentalPath(times, phi, dphi, Q=np.eye(m), Q_inverse_norm=1.0, kind="ivp",
                           jac0=jacobian_along(problem, trajectory, 0.0),
                           mesh_nodes=times.size)


def _propagate_bvp(problem, trajectory, tol) -> FundamentalPath:
    m = problem.dim
    bc = problem.boundary

    nodes = trajectory.mesh.nodes if trajectory is not None else Mesh.uniform(problem.T, 64).nodes
    E = np.eye(m)

    def solve(ts, previous):
        J = jacobians_along(problem, trajectory, ts)
        psi = _bvp.solve_linear_collocation(None, bc, ts, E, J=J)
        return psi, J @ psi

    def f_mid(tm, Um):
        return jacobians_along(problem, trajectory, tm) @ Um

    times, psi, dpsi, _, err = _bvp.adaptive_collocation(solve, f_mid, nodes, tol,
                                                         label=problem.name)
    if not err <= tol:
        # for a linear problem the collocation solutions converge unless the
        # continuous problem has no unique solution
        raise UnsolvableBVPError(
            f"fundamental solution did not converge (refinement error {err:.3e} > {tol:.1e}); "
            "the BVP is numerically singular")
    J = jacobians_along(problem, trajectory, times)
    stability = float(np.max(np.abs(psi).sum(axis=2)))
    if not np.isfinite(stability) or stability > BVP_CONDITION_LIMIT:
        raise UnsolvableBVPError(
            f"BVP is numerically singular: max |Phi(t) Q^-1| = {stability:.3e}")
    psi0 = psi[0]
    # cond(Q) is large for well-conditioned dichotomic problems (Phi(T) grows),
    # so solvability is judged by the collocation factorization instead
    with np.errstate(all="ignore"):
        try:
            Q = np.linalg.inv(psi0)
        except np.linalg.LinAlgError:
            Q = None
    if Q is not None and not np.all(np.isfinite(Q)):
        Q = None
    return FundamentalPath(times, psi, dpsi, Q=Q, Q_inverse_norm=float(np.linalg.norm(psi0, np.inf)),
                           kind="bvp", jac0=J[0], frozen_jacobians=J, mesh_nodes=times.size,
                           q_condition=float(np.linalg.cond(psi0)))


def discrete_bvp_responses(problem: Problem, trajectory: Optional[Trajectory],
                           nodes: np.ndarray) -> np.ndarray:
    """Discrete ``Psi_d`` on exactly ``nodes`` (no refinement), shape ``(N+1, m, m)``."""
    return _bvp.solve_linear_collocation(None, problem.boundary, nodes, np.eye(problem.dim),
                                         J=jacobians_along(problem, trajectory, nodes))


# --------------------------------------------------------------------------
# Kreiss problems


_P = np.array([[-1.0, 0.0], [1.0, 1.0]])
_P_INV = np.linalg.inv(_P)


def rotation(t: float) -> np.ndarray:
    c, s = math.cos(t), math.sin(t)
    return np.array([[c, s], [-s, c]])


def kreiss_matrices(t: float, eps: float, modified: bool = False) -> np.ndarray:
    """``A(t)`` of the Kreiss problem or its modified variant."""
    if not eps > 0:
        raise DomainError(f"eps must be positive, got {eps}")
    lam = np.diag([-1.0, -1.0 / eps])
    if not modified:
        Qt = rotation(t)
        return Qt.T @ lam @ Qt
    if eps == 1.0:
        # Lambda = -I commutes through any similarity; Q_1(t) itself is singular
        return -np.eye(2)
    e = math.exp(math.sin(t))
    Qe = np.array([[1.0, eps], [e, e]])
    det = e * (1.0 - eps)
    Qe_inv = np.array([[e, -eps], [-e, 1.0]]) / det
    return Qe_inv @ _P_INV @ lam @ _P @ Qe
