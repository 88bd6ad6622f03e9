import math

import numpy as np
import pytest
from scipy.special import erf

from stiffkit.bvp import (continue_in_parameter, mark_intervals, refine_marked, solve_bvp,
                          solve_bvp_adaptive, solve_linear_collocation)
from stiffkit.errors import ContinuationStall, NewtonError
from stiffkit.integrate import Mesh
from stiffkit.problem import BVP, Problem
from stiffkit.suite import SEPARATED_BC, builtin, linear_problem


def turning_point_exact(x, eps):
    """Solution of eps y'' + x y' = -eps pi^2 cos(pi x) - pi x sin(pi x) on [-1, 1]."""
    return np.cos(np.pi * x) + erf(x / math.sqrt(2 * eps)) / erf(1 / math.sqrt(2 * eps))


def sine_problem():
    # y'' = -pi^2 sin(pi t), y(0) = y(1) = 0, solved by sin(pi t)
    return Problem("sine", 2, lambda t, y, p: np.array([y[1], -math.pi ** 2 * math.sin(math.pi * t)]),
                   T=1.0, kind=BVP, boundary=SEPARATED_BC, eta=[0.0, 0.0],
                   jacobian=lambda t, y, p: np.array([[0.0, 1.0], [0.0, 0.0]]))


def residual_at_boundary(problem, traj):
    bc = problem.boundary
    return np.max(np.abs(bc.B0 @ traj.states[0] + bc.B1 @ traj.states[-1] - problem.eta))


def test_linear_solution_is_exact():
    A = np.array([[0.0, 1.0], [0.0, 0.0]])
    p = linear_problem(A, 1.0, eta=[0.0, 1.0], boundary=SEPARATED_BC)
    mesh = Mesh(np.array([0.0, 0.1, 0.35, 0.4, 0.8, 1.0]))
    traj = solve_bvp(p, mesh)
    np.testing.assert_allclose(traj.states[:, 0], mesh.nodes, atol=1e-14)
    np.testing.assert_allclose(traj.states[:, 1], 1.0, atol=1e-13)


def test_linear_collocation_matches_newton():
    p = builtin("turning-point", eps=1e-2)
    mesh = Mesh.uniform(2.0, 200)
    traj = solve_bvp(p, mesh)
    # the unit responses Psi solve B0 Psi_0 + B1 Psi_N = I
    psi = solve_linear_collocation(lambda t: p.jac(t, None), p.boundary, mesh.nodes, np.eye(2))
    bc = p.boundary
    np.testing.assert_allclose(bc.B0 @ psi[0] + bc.B1 @ psi[-1], np.eye(2), atol=1e-12)
    assert np.all(np.isfinite(traj.states))


def test_turning_point_against_exact_solution():
    eps = 1e-2
    p = builtin("turning-point", eps=eps)
    sol = solve_bvp_adaptive(p, tol=1e-6)
    x = sol.trajectory.t + p.t_offset
    err = np.max(np.abs(sol.trajectory.states[:, 0] - turning_point_exact(x, eps)))
    assert err <= 1e-3
    assert residual_at_boundary(p, sol.trajectory) <= 1e-10 * (1 + np.max(np.abs(sol.trajectory.states)))


def test_second_order_convergence():
    p = sine_problem()
    errors = []
    for N in (16, 32, 64, 128):
        traj = solve_bvp(p, Mesh.uniform(1.0, N))
        errors.append(np.max(np.abs(traj.states[:, 0] - np.sin(np.pi * traj.t))))
    orders = np.log2(np.array(errors[:-1]) / np.array(errors[1:]))
    assert np.all(orders >= 1.8), orders


def test_refinement_changes_shared_nodes_by_h_squared():
    p = sine_problem()
    sols = [solve_bvp(p, Mesh.uniform(1.0, N)) for N in (16, 32, 64, 128)]
    diffs = [np.max(np.abs(f.states[::2, 0] - c.states[:, 0])) for c, f in zip(sols, sols[1:])]
    # diff / h^2 is bounded: it settles to a constant as the mesh is refined
    scaled = np.array(diffs) * np.array([16, 32, 64]) ** 2
    assert np.max(scaled) / np.min(scaled) < 1.2


def test_troesch_mu_one():
    p = builtin("troesch", mu=1.0)
    traj = solve_bvp(p, Mesh.uniform(1.0, 64))
    y = traj.states[:, 0]
    assert y[0] == pytest.approx(0.0, abs=1e-10) and y[-1] == pytest.approx(1.0, abs=1e-10)
    assert np.all(np.diff(y) > 0)


def test_boundary_conditions_to_newton_tolerance():
    for name, params in (("troesch", {"mu": 5.0}), ("layer", {"eps": 0.1})):
        p = builtin(name, **params)
        tol = 1e-10
        traj = solve_bvp(p, Mesh.uniform(p.T, 128), newton_tol=tol)
        assert residual_at_boundary(p, traj) <= tol * (1 + np.max(np.abs(traj.states)))


def test_newton_error_carries_residual():
    p = builtin("troesch", mu=10.0)
    with pytest.raises(NewtonError) as info:
        solve_bvp(p, Mesh.uniform(1.0, 32), max_iters=1)
    assert info.value.residual is not None and info.value.residual > 0


def test_mesh_must_match_interval():
    with pytest.raises(ValueError):
        solve_bvp(builtin("troesch"), Mesh.uniform(2.0, 8))


def test_guess_shape_checked():
    with pytest.raises(ValueError, match="guess"):
        solve_bvp(builtin("troesch"), Mesh.uniform(1.0, 8), guess=np.zeros((3, 2)))


# --------------------------------------------------------------------------
# refinement helpers


def test_refine_marked_bisects_only_marked():
    nodes = np.array([0.0, 1.0, 3.0, 4.0])
    out = refine_marked(nodes, np.array([False, True, False]))
    np.testing.assert_array_equal(out, [0.0, 1.0, 2.0, 3.0, 4.0])


def test_mark_intervals_falls_back_to_largest():
    ind = np.array([1e-9, 4e-9, 3e-9])
    np.testing.assert_array_equal(mark_intervals(ind, 1.0), [False, True, True])
    np.testing.assert_array_equal(mark_intervals(np.array([0.5, 1e-9]), 0.1), [True, False])


def test_adaptive_concentrates_nodes_in_the_layer():
    eps = 1e-4
    p = builtin("turning-point", eps=eps)
    traj = solve_bvp_adaptive(p, tol=1e-5).trajectory
    x = traj.t + p.t_offset
    h = np.diff(x)
    mid = 0.5 * (x[:-1] + x[1:])
    assert np.median(h[np.abs(mid) < 10 * math.sqrt(eps)]) < 0.5 * np.median(h)


# --------------------------------------------------------------------------
# continuation


def test_troesch_continuation_is_bounded():
    res = continue_in_parameter(builtin("troesch", mu=1.0), "mu", [1.0, 2.0, 5.0, 10.0])
    assert len(res.solutions) == 4
    for sol in res.solutions:
        assert np.max(np.abs(sol.states[:, 0])) <= 1.0 + 1e-9
        assert np.all(np.diff(sol.states[:, 0]) >= -1e-12)


def test_single_value_is_plain_solve():
    p = builtin("troesch", mu=2.0)
    mesh = Mesh.uniform(1.0, 40)
    res = continue_in_parameter(p, "mu", [2.0], mesh_policy="fixed", mesh=mesh)
    direct = solve_bvp(p, mesh)
    assert res.inserted == []
    np.testing.assert_array_equal(res.solutions[0].states, direct.states)


def test_layer_sharpens():
    res = continue_in_parameter(builtin("layer", eps=1.0), "eps", [1.0, 1e-2, 1e-4])
    slopes = [np.max(np.abs(s.states[:, 1])) for s in res.solutions]
    assert slopes[0] < slopes[1] < slopes[2]


def test_continuation_inserts_values_and_stalls():
    # Newton from the mu = 1 solution does not reach mu = 20 in one step
    p = builtin("troesch", mu=1.0)
    res = continue_in_parameter(p, "mu", [1.0, 20.0])
    assert res.inserted == [pytest.approx(20.0 ** 0.5)]  # geometric midpoint
    y = res.solutions[-1].states[:, 0]
    assert np.max(y) <= 1.0 + 1e-9 and np.all(np.diff(y) >= -1e-12)
    with pytest.raises(ContinuationStall) as info:
        continue_in_parameter(p, "mu", [1.0, 20.0], max_depth=0)
    assert info.value.last_value == 1.0 and len(info.value.results) == 1


def test_continuation_values_must_be_monotone():
    with pytest.raises(ValueError, match="monotone"):
        continue_in_parameter(builtin("troesch"), "mu", [1.0, 3.0, 2.0])
    with pytest.raises(ValueError):
        continue_in_parameter(builtin("troesch"), "mu", [1.0], mesh_policy="magic")
