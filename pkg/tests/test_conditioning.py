import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stiffkit import conditioning as cond
from stiffkit.analysis import AnalysisOptions, analyze, check_discrete
from stiffkit.errors import DomainError
from stiffkit.integrate import EXPLICIT_EULER, IMPLICIT_EULER, MethodSpec, Mesh, integrate_fixed
from stiffkit.problem import BoundaryCondition
from stiffkit.suite import builtin, linear_problem
from stiffkit.variational import propagate_fundamental

IVP_BC = BoundaryCondition(np.eye(2), np.zeros((2, 2)))
SPLIT_BC = BoundaryCondition(np.diag([1.0, 0.0]), np.diag([0.0, 1.0]))


def lti_path(A, T):
    return propagate_fundamental(linear_problem(np.atleast_2d(A), T), rtol=1e-10, atol=1e-14)


def report_for(A, T, random=8, hill_climb=True):
    path = lti_path(A, T)
    dirs = cond.DirectionSet.build(path.dim, random=random, seed=1, jac0=path.jac0)
    return cond.maximize_sigma(path, dirs, hill_climb=hill_climb)


# --------------------------------------------------------------------------
# continuous parameters against closed forms


def test_scalar_decay_closed_form():
    path = lti_path([[-2.0]], 10.0)
    kappa, gamma = cond.kappa_gamma_continuous(path, [1.0])
    assert kappa == pytest.approx(1.0, abs=1e-12)
    assert gamma == pytest.approx((1 - math.exp(-20)) / 20, rel=1e-4)
    assert kappa / gamma == pytest.approx(20.0, rel=1e-4)
    assert cond.scalar_closed_form(-2.0, 10.0) == pytest.approx((1.0, (1 - math.exp(-20)) / 20), rel=1e-14)


@pytest.mark.parametrize("T", [0.5, 3.0, 40.0])
def test_zero_eigenvalue_gives_ones(T):
    path = lti_path([[0.0]], T)
    kappa, gamma = cond.kappa_gamma_continuous(path, [-3.0])
    assert kappa == pytest.approx(1.0, abs=1e-6) and gamma == pytest.approx(1.0, abs=1e-6)
    assert cond.scalar_closed_form(0.0, T) == (1.0, 1.0)


def test_growing_scalar_closed_form():
    path = lti_path([[0.5]], 4.0)
    kappa, gamma = cond.kappa_gamma_continuous(path, [1.0])
    k, g = cond.scalar_closed_form(0.5, 4.0)
    assert kappa == pytest.approx(k, rel=1e-6) and gamma == pytest.approx(g, rel=1e-4)


def test_fast_mode_gamma():
    T = 10.0
    path = lti_path(np.diag([-100.0, -1.0]), T)
    kappa, gamma = cond.kappa_gamma_continuous(path, [1.0, 0.0])
    assert kappa == pytest.approx(1.0, abs=1e-12)
    assert gamma == pytest.approx(1 / (100 * T), rel=1e-3)


def test_zero_eta_is_domain_error():
    path = lti_path(np.diag([-1.0, -2.0]), 1.0)
    with pytest.raises(DomainError):
        cond.kappa_gamma_continuous(path, [0.0, 0.0])
    with pytest.raises(DomainError):
        cond.kappa_gamma_continuous(path, [1.0])


def test_gamma_oscillatory_examples():
    assert 1.0 / cond.gamma_oscillatory(2j * math.pi, 10.0) == pytest.approx(20 * math.pi, rel=1e-14)
    assert cond.gamma_oscillatory(-2.0, 10.0) == pytest.approx(0.05, rel=1e-14)
    assert 1.0 / cond.gamma_oscillatory(1j, 2 * math.pi) == pytest.approx(2 * math.pi, rel=1e-14)
    assert cond.gamma_oscillatory(0, 5.0) == 1.0


def test_oscillatory_report():
    rep = cond.oscillatory_report(2j * math.pi, 10.0)
    assert rep.sigma == pytest.approx(62.83185307, rel=1e-9)
    assert rep.flags.oscillatory_variant_used and not rep.flags.stiff


# --------------------------------------------------------------------------
# brute-force oracle: closed-form exponential sampled at 1e5 points


def _random_lti(rng):
    lam = -np.sort(rng.uniform(0.1, 20.0, size=2))
    while abs(lam[0] - lam[1]) < 0.5:
        lam = -np.sort(rng.uniform(0.1, 20.0, size=2))
    V = rng.normal(size=(2, 2))
    while abs(np.linalg.det(V)) < 0.3:
        V = rng.normal(size=(2, 2))
    return lam, V


@pytest.mark.parametrize("seed", range(5))
def test_brute_force_oracle(seed):
    rng = np.random.default_rng(100 + seed)
    lam, V = _random_lti(rng)
    Vi = np.linalg.inv(V)
    A = V @ np.diag(lam) @ Vi
    T = 2.0
    path = lti_path(A, T)
    ts = np.linspace(0.0, T, 100_001)
    for eta in (np.array([1.0, 0.0]), rng.normal(size=2)):
        # y(t) = V diag(e^{lam t}) V^{-1} eta
        y = (V[None, :, :] * np.exp(np.outer(ts, lam))[:, None, :]) @ (Vi @ eta)
        r = np.max(np.abs(y), axis=1) / np.max(np.abs(eta))
        kappa_bf = r.max()
        gamma_bf = np.sum(np.diff(ts) * 0.5 * (r[1:] + r[:-1])) / T
        kappa, gamma = cond.kappa_gamma_continuous(path, eta)
        assert kappa == pytest.approx(kappa_bf, rel=1e-2)
        assert gamma == pytest.approx(gamma_bf, rel=1e-2)


# --------------------------------------------------------------------------
# properties


@settings(max_examples=40, deadline=None, derandomize=True)
@given(st.floats(-1e3, 1e3).filter(lambda c: abs(c) > 1e-3),
       st.tuples(st.floats(-1, 1), st.floats(-1, 1)).filter(lambda v: max(map(abs, v)) > 1e-2),
       st.sampled_from(["inf", "2"]))
def test_scale_invariance(c, eta, norm):
    path = _SCALE_PATH
    k1, g1 = cond.kappa_gamma_continuous(path, np.array(eta), norm)
    k2, g2 = cond.kappa_gamma_continuous(path, c * np.array(eta), norm)
    assert k2 == pytest.approx(k1, rel=1e-10) and g2 == pytest.approx(g1, rel=1e-10)


_SCALE_PATH = lti_path(np.array([[-3.0, 1.0], [0.5, -0.2]]), 3.0)


@pytest.mark.parametrize("A", [[[0.3]], [[-1.5]], np.diag([-2.0, 0.4]), np.diag([-5.0, -0.1])])
def test_kappa_nondecreasing_in_T(A):
    A = np.atleast_2d(A)
    eta = np.ones(A.shape[0])
    values = []
    for T in (0.25, 0.5, 1.0, 2.0, 4.0):
        values.append(cond.kappa_gamma_continuous(lti_path(A, T), eta)[0])
    assert all(b >= a * (1 - 1e-9) for a, b in zip(values, values[1:])), values


@pytest.mark.parametrize("ratio", [10.0, 1e2, 1e4, 1e6])
def test_sigma_at_slow_time_scale(ratio):
    rep = report_for(np.diag([-ratio, -1.0]), 1.0)
    assert rep.sigma == pytest.approx(ratio, rel=0.1)


def test_sigma_at_least_one_everywhere():
    for A, T in (([[0.0]], 1.0), ([[2.0]], 3.0), (np.diag([-4.0, 1.0]), 2.0)):
        rep = report_for(A, T)
        assert rep.sigma >= 1.0
        assert all(d.gamma <= d.kappa * (1 + 1e-12) for d in rep.per_direction)


# --------------------------------------------------------------------------
# maximization and classification


def test_scalar_maximization_is_the_scalar_sigma():
    rep = report_for([[-2.0]], 10.0)
    assert rep.sigma == pytest.approx(20.0, rel=1e-4)
    assert all(d.sigma == pytest.approx(rep.sigma, rel=1e-12) for d in rep.per_direction)
    assert rep.transient_time == pytest.approx(0.5, rel=1e-4)


def test_lambert_max_over_directions_is_large():
    an = analyze(builtin("lambert"), AnalysisOptions(directions=8, seed=3))
    rep = an.report
    assert 500.0 <= rep.sigma <= 2000.0
    assert rep.sigma >= max(d.sigma for d in rep.per_direction)


def test_hill_climb_never_lowers_sigma():
    path = lti_path(np.array([[-30.0, 5.0], [2.0, -1.0]]), 1.0)
    dirs = cond.DirectionSet.build(2, random=4, seed=7)
    plain = cond.maximize_sigma(path, dirs, hill_climb=False)
    climbed = cond.maximize_sigma(path, dirs, hill_climb=True)
    assert climbed.sigma >= plain.sigma
    assert climbed.hill_climb_steps <= 20
    again = cond.maximize_sigma(path, dirs, hill_climb=True)
    assert again.sigma == climbed.sigma and np.array_equal(again.eta_star, climbed.eta_star)


def test_classify_examples():
    rep = report_for([[-2.0]], 10.0)
    assert not cond.classify(rep, 1e3).stiff
    assert cond.classify(rep, 10.0).stiff
    grow = report_for([[1.0]], 40.0)
    assert grow.kappa == pytest.approx(math.exp(40), rel=1e-5)
    assert grow.flags.ill_conditioned


def test_kreiss_is_stiff():
    an = analyze(builtin("kreiss", eps=1e-6), AnalysisOptions(directions=4))
    assert an.report.flags.stiff and an.report.sigma > 1e5


# --------------------------------------------------------------------------
# directions


def test_direction_set_contents():
    dirs = cond.DirectionSet.build(3, random=5, seed=11, jac0=np.diag([-1.0, -5.0, -2.0]),
                                   user=[[0, 1e-3, -1e-3], [0, 0, 0]])
    assert len(dirs) == 6 + 5 + 3 + 1  # the zero user vector is dropped
    np.testing.assert_allclose(np.max(np.abs(dirs.vectors), axis=1), 1.0)
    assert dirs.labels[:2] == ["+e1", "-e1"] and dirs.labels[-1] == "user1"
    # dominant eigenvector first
    np.testing.assert_allclose(np.abs(dirs.vectors[dirs.labels.index("eig1.re")]), [0, 1, 0])
    again = cond.DirectionSet.build(3, random=5, seed=11)
    np.testing.assert_array_equal(again.vectors[6:11], dirs.vectors[6:11])
    two = cond.DirectionSet.build(2, random=3, seed=1, norm="2")
    np.testing.assert_allclose(np.linalg.norm(two.vectors, axis=1), 1.0)


def test_seed_resolution(monkeypatch):
    monkeypatch.delenv("STIFFKIT_SEED", raising=False)
    assert cond.resolve_seed(None) == cond.DEFAULT_SEED
    assert cond.resolve_seed(5) == 5


def test_unknown_norm():
    with pytest.raises(ValueError):
        cond.vector_norm(np.ones(2), "1")


# --------------------------------------------------------------------------
# bounds


def test_bounds_for_scalar_equal_direction_values():
    path = lti_path([[-2.0]], 3.0)
    kb, gb = cond.sigma_upper_bounds(path)
    k, g = cond.kappa_gamma_continuous(path, [1.0])
    assert kb == pytest.approx(k, rel=1e-12) and gb == pytest.approx(g, rel=1e-12)


def test_bounds_diagonal():
    path = lti_path(np.diag([-2.0, -1.0]), 1.0)
    kb, gb = cond.sigma_upper_bounds(path)
    assert kb == pytest.approx(1.0, abs=1e-12)
    assert gb == pytest.approx(1 - math.exp(-1), rel=1e-4)


def test_bounds_dominate_samples():
    for problem in (builtin("vdp", mu=10.0), builtin("turning-point", eps=1e-3),
                    linear_problem(np.array([[-3.0, 4.0], [-1.0, -2.0]]), 2.0)):
        an = analyze(problem, AnalysisOptions(directions=8, hill_climb=False))
        kb, gb = cond.sigma_upper_bounds(an.path)
        assert an.report.kappa <= kb * (1 + 1e-10)
        assert all(d.gamma <= gb * (1 + 1e-10) for d in an.report.per_direction)


# --------------------------------------------------------------------------
# discrete parameters and well representation


def test_discrete_single_step():
    res = cond.kappa_gamma_discrete([[1.0], [0.5]], Mesh(np.array([0.0, 1.0])), [1.0])
    assert (res.kappa, res.gamma, res.sigma) == (1.0, 1.0, 1.0)
    assert not res.machine_precision_reached


def test_discrete_constant_sequence():
    mesh = Mesh.uniform(2.0, 10)
    res = cond.kappa_gamma_discrete(np.full((11, 1), 3.0), mesh, [3.0])
    assert (res.kappa, res.gamma, res.sigma) == pytest.approx((1.0, 1.0, 1.0), rel=1e-14)


def test_discrete_implicit_euler_geometric_sequence():
    lam, N = -1e6, 100
    mesh = Mesh.uniform(1.0, N)
    traj, _ = integrate_fixed(MethodSpec(IMPLICIT_EULER), linear_problem([[lam]], 1.0, eta=[1.0]), mesh)
    res = cond.kappa_gamma_discrete(traj.states, mesh, [1.0])
    q = 1.0 / (1.0 + 1e4)
    # sum_i h max(q^{i-1}, q^i) = h (1 + q + ... + q^{N-1})
    assert res.gamma == pytest.approx(0.01 * (1 - q ** N) / (1 - q), rel=1e-12)
    assert res.kappa == 1.0
    assert not res.machine_precision_reached


def test_machine_precision_flag():
    mesh = Mesh(np.array([0.0, 1e-14, 1.0]))
    res = cond.kappa_gamma_discrete([[1.0], [1e-20], [1e-30]], mesh, [1.0])
    assert res.gamma == pytest.approx(1e-14, rel=1e-10)
    assert res.machine_precision_reached


def test_discrete_shape_errors():
    with pytest.raises(ValueError):
        cond.kappa_gamma_discrete([[1.0], [0.5]], Mesh.uniform(1.0, 3), [1.0])
    with pytest.raises(DomainError):
        cond.kappa_gamma_discrete([[1.0], [0.5]], Mesh.uniform(1.0, 1), [0.0])


def test_explicit_euler_fails_wr1():
    lam = -1000.0
    mesh = Mesh.uniform(1.0, 100)
    traj, _ = integrate_fixed(MethodSpec(EXPLICIT_EULER), linear_problem([[lam]], 1.0), mesh)
    res = cond.kappa_gamma_discrete(traj.states, mesh, [1.0])
    assert res.kappa == pytest.approx(9.0 ** 100, rel=1e-12)
    k, g = cond.scalar_closed_form(lam, 1.0)
    v = cond.well_represented(k, g, res.kappa, res.gamma)
    assert not v.kappa_ok and "wr1" in v.failed
    assert v.kappa_ratio == pytest.approx(100 * math.log(9.0), rel=1e-12)


def test_implicit_euler_keeps_wr1():
    lam = -1000.0
    mesh = Mesh.uniform(1.0, 100)
    traj, _ = integrate_fixed(MethodSpec(IMPLICIT_EULER), linear_problem([[lam]], 1.0), mesh)
    res = cond.kappa_gamma_discrete(traj.states, mesh, [1.0])
    k, g = cond.scalar_closed_form(lam, 1.0)
    v = cond.well_represented(k, g, res.kappa, res.gamma)
    assert v.kappa_ok and v.kappa_ratio == 0.0


def test_exact_samples_are_well_represented():
    lam, T = -2.0, 10.0
    mesh = Mesh.uniform(T, 20_000)
    res = cond.kappa_gamma_discrete(np.exp(lam * mesh.nodes)[:, None], mesh, [1.0])
    k, g = cond.scalar_closed_form(lam, T)
    v = cond.well_represented(k, g, res.kappa, res.gamma)
    assert v.passed and v.failed == []
    assert v.gamma_ratio < 1e-3


def test_well_represented_threshold():
    assert cond.well_represented(1.0, 1.0, 2.0, 0.5).passed
    v = cond.well_represented(1.0, 1.0, 2.0 * 1.0001, 0.5)
    assert v.failed == ["wr1"]
    assert cond.well_represented(1.0, 1.0, 1.5, 1.5, tol_factor=1.4).failed == ["wr1", "wr2"]
    assert cond.well_represented(1.0, 1.0, math.inf, 0.0).failed == ["wr1", "wr2"]


def test_check_discrete_pipeline():
    p = builtin("scalar", T=1.0, **{"lambda": -1000.0})
    ee = check_discrete(p, EXPLICIT_EULER, Mesh.uniform(1.0, 100), AnalysisOptions(directions=0))
    ie = check_discrete(p, IMPLICIT_EULER, Mesh.uniform(1.0, 100), AnalysisOptions(directions=0))
    assert "wr1" in ee.verdict.failed
    assert ie.verdict.kappa_ok
    assert ee.dichotomy.verdict == "mismatch" and ie.dichotomy.verdict == "matched"


# --------------------------------------------------------------------------
# matching rules


def test_dichotomy_examples():
    r = cond.check_dichotomy(np.diag([-1.0, 2.0]), SPLIT_BC)
    assert (r.negative, r.positive, r.rank_b0, r.rank_b1, r.verdict) == (1, 1, 1, 1, "matched")
    r = cond.check_dichotomy(np.diag([-1.0, -2.0]), IVP_BC)
    assert (r.negative, r.positive, r.verdict) == (2, 0, "matched")
    r = cond.check_dichotomy(np.diag([-1.0, 2.0]), IVP_BC)
    assert r.verdict == "mismatch"
    r = cond.check_dichotomy(np.diag([-1.0, 0.0]), IVP_BC)
    assert r.marginal == 1 and r.verdict == "indeterminate"


def test_dichotomy_from_path_is_frozen():
    path = lti_path(np.diag([-1.0, -3.0]), 1.0)
    r = cond.check_dichotomy(path, IVP_BC)
    assert r.frozen and r.verdict == "matched" and "frozen" in r.describe()


def test_discrete_dichotomy():
    mesh = Mesh.uniform(1.0, 400)
    p = linear_problem(np.diag([-1.0, 3.0]), 1.0)
    _, sm = integrate_fixed(MethodSpec(IMPLICIT_EULER), p, mesh)
    r = cond.check_dichotomy_discrete(sm.matrices, SPLIT_BC)
    assert (r.negative, r.positive, r.verdict) == (1, 1, "matched") and r.discrete
    r = cond.check_dichotomy_discrete(sm.matrices, IVP_BC)
    assert r.verdict == "mismatch"
    # a product far beyond the floating point range still has a sign for log|mu|
    mesh = Mesh.uniform(1.0, 1000)
    _, sm = integrate_fixed(MethodSpec(EXPLICIT_EULER), linear_problem([[-1e5]], 1.0), mesh)
    r = cond.check_dichotomy_discrete(sm.matrices, BoundaryCondition([[1.0]], [[0.0]]))
    assert (r.negative, r.positive) == (0, 1)
