"""Conditioning-driven mesh selection for boundary value problems.

The mesh is adapted until the discrete parameters ``kappa_d``, ``gamma_d``
match continuous estimates.  The continuous estimates come from the
fundamental path computed once by collocation on nested meshes refined until
their Richardson difference is below a tolerance.  Intervals are split or merged so that the contributions
``g_i = h_i max(||y_i||, ||y_{i-1}||) / T`` to ``gamma_d`` are equidistributed.
This is a reconstruction of the conditioning-matching idea, not of any
specific published code.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import conditioning as cond
from .analysis import AnalysisOptions, reference_solution
from .bvp import refine_marked
from .errors import StiffkitError
from .integrate import Mesh, Trajectory
from .problem import Problem
from .variational import discrete_bvp_responses, propagate_fundamental


@dataclass
class RoundRecord:
    round: int
    N: int
    kappa_d: float
    gamma_d: float
    sigma_d: float
    kappa_est: float
    gamma_est: float
    mismatch: float  # max(|log kappa_d/kappa_c|, |log gamma_d/gamma_c|) over directions
    gamma_mismatch: float  # max |gamma_d - gamma_c| / gamma_c over directions
    verdict: bool


@dataclass
class MeshSelection:
    mesh: Mesh
    history: list = field(default_factory=list)
    converged: bool = False
    rollbacks: int = 0

    def history_csv(self, path_or_buf) -> None:
        from .export import write_csv

        header = ["round", "N", "kappa_d", "gamma_d", "sigma_d", "mismatch", "verdict"]
        rows = [[r.round, r.N, r.kappa_d, r.gamma_d, r.sigma_d, r.mismatch,
                 "pass" if r.verdict else "fail"]
                for r in self.history]
        write_csv(path_or_buf, header, rows)

    def mesh_text(self) -> str:
        from .export import fmt

        return "".join(fmt(float(t)) + "\n" for t in self.mesh.nodes)


def _directions(problem: Problem, norm: str) -> np.ndarray:
    dirs = [np.asarray(p, float) for p in problem.perturbations]
    if not dirs:
        dirs = list(np.eye(problem.dim))
    dirs = [d / cond.vector_norm(d, norm) for d in dirs if cond.vector_norm(d, norm) > 0]
    return np.array(dirs)


class _Evaluator:
    """Discrete responses on candidate meshes and the fixed continuous target."""

    def __init__(self, problem: Problem, norm: str, nominal: Optional[Trajectory], tol: float):
        self.problem = problem
        self.norm = norm
        self.etas = _directions(problem, norm)
        if problem.linear is None and nominal is None:
            nominal = reference_solution(problem, AnalysisOptions(bvp_tol=tol))
        self.nominal = nominal
        path = propagate_fundamental(problem, nominal, bvp_tol=tol)
        self.kappa_c, self.gamma_c = cond.kappa_gamma_many(path, self.etas, norm)

    def responses(self, mesh: Mesh) -> np.ndarray:
        """``(k, N+1, m)`` discrete responses to each direction."""
        psi = discrete_bvp_responses(self.problem, self.nominal, mesh.nodes)
        return np.einsum("nij,kj->kni", psi, self.etas)

    def parameters(self, mesh: Mesh, Y: np.ndarray):
        res = [cond.kappa_gamma_discrete(y, mesh, eta, self.norm) for y, eta in zip(Y, self.etas)]
        return np.array([r.kappa for r in res]), np.array([r.gamma for r in res])


def _contributions(mesh: Mesh, Y: np.ndarray, gamma: np.ndarray, norm: str) -> np.ndarray:
    """Per-interval share of ``gamma_d``, the maximum over directions."""
    r = cond.vector_norm(Y, norm, axis=2)  # (k, N+1)
    g = mesh.h[None, :] * np.maximum(r[:, 1:], r[:, :-1]) / mesh.T
    return np.max(g / (gamma[:, None] * 1.0), axis=0)


def _variation(Y: np.ndarray, norm: str) -> np.ndarray:
    return np.max(cond.vector_norm(np.diff(Y, axis=1), norm, axis=2), axis=0)


def equidistribute(nodes: np.ndarray, g: np.ndarray, variation: np.ndarray,
                   merge: bool = True) -> np.ndarray:
    """Split intervals with ``g_i > 2 mean(g)`` and variation above the
    median; merge disjoint adjacent pairs whose contributions are both below
    half the mean."""
    mean = float(np.mean(g))
    split = (g > 2.0 * mean) & (variation > np.median(variation))
    keep = np.ones(nodes.size, dtype=bool)
    if merge:
        small = g < 0.5 * mean
        i = 0
        while i < g.size - 1:
            if small[i] and small[i + 1] and not split[i] and not split[i + 1]:
                keep[i + 1] = False  # drop the shared node
                i += 2
            else:
                i += 1
    mids = 0.5 * (nodes[:-1] + nodes[1:])[split]
    return np.sort(np.concatenate([nodes[keep], mids]))


def _candidates(nodes, g, var):
    """Meshes to try in order: the equidistribution rule with and without
    merging, then splitting the larger half of the contributions, then
    uniform bisection (each at most doubles the node count)."""
    seen = set()
    for nodes_new in (lambda: equidistribute(nodes, g, var, merge=True),
                      lambda: equidistribute(nodes, g, var, merge=False),
                      lambda: refine_marked(nodes, g >= np.median(g)),
                      lambda: refine_marked(nodes, np.ones(g.size, dtype=bool))):
        cand = nodes_new()
        key = cand.tobytes()
        if np.array_equal(cand, nodes) or key in seen:
            continue
        seen.add(key)
        yield cand


def _evaluate(ev: _Evaluator, mesh: Mesh, tol_factor: float):
    Y = ev.responses(mesh)
    kd, gd = ev.parameters(mesh, Y)
    verdicts = [cond.well_represented(k, g, kk, gg, tol_factor)
                for k, g, kk, gg in zip(ev.kappa_c, ev.gamma_c, kd, gd)]
    return _State(mesh, Y, kd, gd, ev.kappa_c, ev.gamma_c, all(v.passed for v in verdicts))


@dataclass
class _State:
    mesh: Mesh
    Y: np.ndarray
    kd: np.ndarray
    gd: np.ndarray
    k_est: np.ndarray
    g_est: np.ndarray
    ok: bool

    def mismatch(self) -> float:
        """``max(|log(kappa_d/kappa_c)|, |log(gamma_d/gamma_c)|)`` over directions."""
        with np.errstate(divide="ignore", invalid="ignore"):
            r = np.maximum(np.abs(np.log(self.kd / self.k_est)), np.abs(np.log(self.gd / self.g_est)))
        return float(np.max(np.where(np.isfinite(r), r, np.inf)))

    def gamma_mismatch(self) -> float:
        return float(np.max(np.abs(self.gd - self.g_est) / self.g_est))

    def record(self, rnd: int) -> RoundRecord:
        i = int(np.argmax(self.kd / self.gd))
        return RoundRecord(rnd, self.mesh.N, float(self.kd[i]), float(self.gd[i]),
                           float(self.kd[i] / self.gd[i]), float(self.k_est[i]),
                           float(self.g_est[i]), self.mismatch(), self.gamma_mismatch(), self.ok)


def select_mesh(problem: Problem, initial_mesh: Optional[Mesh] = None, tol_factor: float = 2.0,
                max_rounds: int = 20, norm: str = "inf",
                nominal: Optional[Trajectory] = None,
                continuous_tol: float = 1e-6) -> MeshSelection:
    """Adapt ``initial_mesh`` until the discrete parameters match the
    continuous estimates within ``tol_factor`` for every perturbation
    direction of the problem.

    Matching is monotone: a candidate mesh is accepted only if its log
    mismatch ``max(|log kappa_d/kappa_c|, |log gamma_d/gamma_c|)`` does not
    exceed that of the previous mesh.  Otherwise the round is rolled back and
    retried with a more conservative candidate (no merging, then wider
    splitting); if no candidate qualifies the selection stops unconverged.  The node count at most doubles per round.  Nonlinear
    problems are linearized about ``nominal`` (computed adaptively when not
    given, for example from continuation).
    """
    if problem.is_ivp:
        raise ValueError("mesh selection applies to boundary value problems")
    mesh = initial_mesh or Mesh.uniform(problem.T, 32)
    ev = _Evaluator(problem, norm, nominal, continuous_tol)
    result = MeshSelection(mesh)
    if max_rounds <= 0:
        return result
    state = _evaluate(ev, mesh, tol_factor)
    result.history.append(state.record(0))
    for rnd in range(1, max_rounds + 1):
        if state.ok:
            break
        g = _contributions(state.mesh, state.Y, state.gd, norm)
        var = _variation(state.Y, norm)
        nodes_now = state.mesh.nodes
        accepted = None
        for nodes in _candidates(nodes_now, g, var):
            try:
                candidate = _evaluate(ev, Mesh(nodes), tol_factor)
            except StiffkitError:
                continue
            if candidate.mismatch() <= state.mismatch():
                accepted = candidate
                break
            result.rollbacks += 1
        if accepted is None:
            break
        result.history.append(accepted.record(rnd))
        state = accepted
    result.mesh = state.mesh
    result.converged = state.ok
    return result
