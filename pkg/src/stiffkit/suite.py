"""Built-in benchmark problems and parameter sweeps.

Second order scalar boundary value problems are written as first order
systems ``y1 = y, y2 = y'``.  Problems on ``[a, b]`` are shifted to ``[0, b-a]``.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ContinuationStall, ProblemError, StiffkitError
from .problem import BVP, IVP, BoundaryCondition, LinearTV, Problem, ProblemSpec, check_evaluable

SEPARATED_BC = BoundaryCondition([[1.0, 0.0], [0.0, 0.0]], [[0.0, 0.0], [1.0, 0.0]])


def _param(params, name, default):
    return float(params.get(name, default))


# --------------------------------------------------------------------------
# problem factories: (params, T or None) -> keyword arguments of Problem


def _scalar(params, T):
    lam = _param(params, "lambda", -1.0)
    A = np.array([[lam]])
    return dict(
        dim=1, T=T or 1.0, eta=[1.0],
        rhs=lambda t, y, p: A @ y,
        jacobian=lambda t, y, p: A,
        linear=LinearTV(lambda t: A, constant=True),
        params={"lambda": lam},
    )


def _vdp(params, T):
    mu = _param(params, "mu", 10.0)

    def rhs(t, y, p):
        return np.array([y[1], -y[0] + mu * y[1] * (1.0 - y[0] * y[0])])

    def jac(t, y, p):
        return np.array([[0.0, 1.0],
                         [-1.0 - 2.0 * mu * y[0] * y[1], mu * (1.0 - y[0] * y[0])]])

    default_T = 2.0 * mu if mu > 0 else 2.0 * math.pi
    return dict(dim=2, T=T or default_T, eta=[2.0, 0.0], rhs=rhs, jacobian=jac,
                params={"mu": mu})


def _robertson(params, T):
    def rhs(t, y, p):
        a = 0.04 * y[0]
        b = 1e4 * y[1] * y[2]
        c = 3e7 * y[1] * y[1]
        return np.array([-a + b, a - b - c, c])

    def jac(t, y, p):
        return np.array([
            [-0.04, 1e4 * y[2], 1e4 * y[1]],
            [0.04, -1e4 * y[2] - 6e7 * y[1], -1e4 * y[1]],
            [0.0, 6e7 * y[1], 0.0],
        ])

    return dict(dim=3, T=T or 100.0, eta=[1.0, 0.0, 0.0], rhs=rhs, jacobian=jac,
                perturbations=[[0.0, 1.0, -1.0]], params={})


def _kreiss_factory(modified: bool):
    def factory(params, T):
        from .variational import kreiss_matrices

        eps = _param(params, "eps", 1e-3)
        if not eps > 0:
            from .errors import DomainError

            raise DomainError("eps must be positive")

        def A(t):
            return kreiss_matrices(t, eps, modified=modified)

        return dict(
            dim=2, T=T or 4.0 * math.pi, eta=[-eps, 1.0],
            rhs=lambda t, y, p: A(t) @ y,
            jacobian=lambda t, y, p: A(t),
            linear=LinearTV(A, constant=False),
            perturbations=[[-eps, 1.0]],
            params={"eps": eps},
        )

    return factory


LAMBERT_A = np.array([[-2.0, 1.0], [-1.999, 0.999]])


def _lambert(params, T):
    A = LAMBERT_A

    def rhs(t, y, p):
        g = np.array([2.0 * math.sin(t), 0.999 * (math.sin(t) - math.cos(t))])
        return A @ y + g

    return dict(dim=2, T=T or 1000.0, eta=[2.0, 3.0], rhs=rhs,
                jacobian=lambda t, y, p: A,
                linear=LinearTV(lambda t: A, constant=True),
                perturbations=[[2.0, 3.0], [1.0, 1.0]], params={})


def _turning_point(params, T):
    eps = _param(params, "eps", 1e-2)
    pi = math.pi

    def rhs(t, y, p):
        x = t - 1.0
        return np.array([y[1], (-x * y[1] - eps * pi * pi * math.cos(pi * x)
                                - pi * x * math.sin(pi * x)) / eps])

    def A(t):
        return np.array([[0.0, 1.0], [0.0, -(t - 1.0) / eps]])

    return dict(dim=2, T=2.0, kind=BVP, boundary=SEPARATED_BC, eta=[-2.0, 0.0], rhs=rhs,
                jacobian=lambda t, y, p: A(t), linear=LinearTV(A, constant=False),
                perturbations=[[1.0, 0.0], [0.0, 1.0]], params={"eps": eps}, t_offset=-1.0)


def _layer(params, T):
    eps = _param(params, "eps", 1e-2)
    half_pi = 0.5 * math.pi

    def rhs(t, y, p):
        e = math.exp(y[0])
        return np.array([y[1], (-e * y[1] + half_pi * math.sin(half_pi * t) * e * e) / eps])

    def jac(t, y, p):
        e = math.exp(y[0])
        return np.array([[0.0, 1.0],
                         [(-e * y[1] + math.pi * math.sin(half_pi * t) * e * e) / eps, -e / eps]])

    return dict(dim=2, T=1.0, kind=BVP, boundary=SEPARATED_BC, eta=[0.0, 0.0], rhs=rhs,
                jacobian=jac, perturbations=[[1.0, 0.0], [0.0, 1.0]], params={"eps": eps})


def _troesch(params, T):
    mu = _param(params, "mu", 1.0)

    def rhs(t, y, p):
        return np.array([y[1], mu * math.sinh(mu * y[0])])

    def jac(t, y, p):
        return np.array([[0.0, 1.0], [mu * mu * math.cosh(mu * y[0]), 0.0]])

    return dict(dim=2, T=1.0, kind=BVP, boundary=SEPARATED_BC, eta=[0.0, 1.0], rhs=rhs,
                jacobian=jac, perturbations=[[1.0, 0.0], [0.0, 1.0]], params={"mu": mu})


@dataclass(frozen=True)
class Builtin:
    factory: Callable
    description: str
    defaults: dict


BUILTINS: dict[str, Builtin] = {
    "scalar": Builtin(_scalar, "y' = lambda y, y(0) = 1", {"lambda": -1.0}),
    "vdp": Builtin(_vdp, "Van der Pol oscillator on [0, 2 mu], y(0) = (2, 0)", {"mu": 10.0}),
    "robertson": Builtin(_robertson, "Robertson chemical kinetics, y(0) = (1, 0, 0)", {}),
    "kreiss": Builtin(_kreiss_factory(False), "Kreiss problem A(t) = Q(t)^T L_eps Q(t) on [0, 4 pi]",
                      {"eps": 1e-3}),
    "kreiss-modified": Builtin(_kreiss_factory(True),
                               "modified Kreiss problem A(t) = Q_eps^-1 P^-1 L_eps P Q_eps on [0, 4 pi]",
                               {"eps": 1e-3}),
    "lambert": Builtin(_lambert, "forced 2x2 linear system with eigenvalues -1, -0.001, y(0) = (2, 3)",
                       {}),
    "turning-point": Builtin(_turning_point,
                             "eps y'' + t y' = -eps pi^2 cos(pi t) - pi t sin(pi t) on [-1, 1]",
                             {"eps": 1e-2}),
    "layer": Builtin(_layer, "eps y'' + exp(y) y' - pi/2 sin(pi t/2) exp(2y) = 0, y(0) = y(1) = 0",
                     {"eps": 1e-2}),
    "troesch": Builtin(_troesch, "Troesch problem y'' = mu sinh(mu y), y(0) = 0, y(1) = 1",
                       {"mu": 1.0}),
}


def build_builtin(spec: ProblemSpec) -> Problem:
    name = spec.builtin
    if name not in BUILTINS:
        raise ProblemError(f"unknown builtin {name!r}; available: {', '.join(BUILTINS)}")
    entry = BUILTINS[name]
    unknown = set(spec.params) - set(entry.defaults)
    if unknown:
        raise ProblemError(f"builtin {name!r} has no parameter(s) {', '.join(sorted(unknown))}")
    T = None
    if spec.interval is not None:
        a, b = spec.interval
        T = b - a
        if not T > 0:
            from .errors import DomainError

            raise DomainError(f"interval length must be positive, got [{a}, {b}]")
    kwargs = entry.factory(dict(spec.params), T)
    kwargs.setdefault("kind", IVP)
    perturbations = list(kwargs.pop("perturbations", [])) + [list(p) for p in spec.perturbations]
    eta = kwargs.pop("eta")
    if spec.eta is not None:
        eta = list(spec.eta)
    problem = Problem(name=spec.name or name, perturbations=perturbations, eta=eta, spec=spec,
                      **kwargs)
    if problem.T <= 0:
        from .errors import DomainError

        raise DomainError("T must be positive")
    check_evaluable(problem)
    return problem


def builtin(name: str, T: Optional[float] = None, **params) -> Problem:
    """Shorthand: ``builtin("vdp", mu=10)``."""
    interval = None if T is None else (0.0, float(T))
    return build_builtin(ProblemSpec(builtin=name, params=params, interval=interval))


def linear_problem(A, T: float, eta=None, boundary: Optional[BoundaryCondition] = None,
                   name: str = "linear") -> Problem:
    """Constant-coefficient problem ``y' = A y`` (IVP unless ``boundary`` is given)."""
    A = np.array(A, dtype=float)
    m = A.shape[0]
    eta = np.ones(m) if eta is None else eta
    return Problem(name=name, dim=m, rhs=lambda t, y, p: A @ y, T=float(T),
                   kind=IVP if boundary is None else BVP, boundary=boundary, eta=eta,
                   jacobian=lambda t, y, p: A, linear=LinearTV(lambda t: A, constant=True))


# --------------------------------------------------------------------------
# benchmark cases and sweeps


@dataclass(frozen=True)
class BenchmarkCase:
    """A built-in problem with its sweep.

    ``param`` is the swept quantity (a problem parameter or ``"T"``).
    ``expected_scaling`` is ``(exponent, tolerance)`` for the least-squares
    slope of ``log sigma`` against ``log(1/param)``.
    """

    name: str
    builtin: str
    param: str
    grid: tuple
    expected_scaling: Optional[tuple] = None
    expected_monotone: bool = True
    continuation: bool = False
    target: Optional[tuple] = None  # (param value, sigma)
    notes: str = ""

    def benchmark_perturbations(self, value: Optional[float] = None) -> list:
        """Perturbation directions named with the problem (always in the direction set)."""
        return [np.array(p) for p in self.problem(value).perturbations]

    def problem(self, value: Optional[float] = None) -> Problem:
        if value is None:
            return builtin(self.builtin)
        if self.param == "T":
            return builtin(self.builtin, T=value)
        return builtin(self.builtin, **{self.param: value})


CASES: dict[str, BenchmarkCase] = {c.name: c for c in (
    BenchmarkCase("scalar", "scalar", "lambda", (-0.2, -2.0, -20.0, -200.0),
                  notes="T = 1; sigma is close to |lambda| T once |lambda| T >> 1"),
    BenchmarkCase("vdp", "vdp", "mu", (1.0, 10.0, 100.0, 500.0, 1000.0)),
    BenchmarkCase("robertson", "robertson", "T", (1.0, 10.0, 100.0, 1000.0, 10000.0)),
    BenchmarkCase("kreiss", "kreiss", "eps", tuple(10.0 ** -k for k in range(1, 7)),
                  expected_scaling=(1.0, 0.15)),
    BenchmarkCase("kreiss-modified", "kreiss-modified", "eps",
                  tuple(10.0 ** -k for k in range(1, 7)), expected_scaling=(1.0, 0.15)),
    BenchmarkCase("lambert", "lambert", "T", (10.0, 100.0, 1000.0),
                  notes="initial point (2, 3) leaves the slow mode silent"),
    BenchmarkCase("turning-point", "turning-point", "eps", tuple(10.0 ** -k for k in range(2, 9)),
                  expected_scaling=(0.5, 0.1)),
    BenchmarkCase("layer", "layer", "eps", tuple(10.0 ** -k for k in range(0, 7)),
                  expected_scaling=(1.0, 0.15), continuation=True),
    BenchmarkCase("troesch", "troesch", "mu", (1.0, 2.0, 5.0, 10.0, 20.0, 30.0, 40.0, 50.0),
                  continuation=True, target=(50.0, 1.74e12)),
)}


def load_case(name: str) -> BenchmarkCase:
    if name not in CASES:
        raise ProblemError(f"unknown case {name!r}; available: {', '.join(CASES)}")
    return CASES[name]


def continuation_path(problem: Problem) -> Optional[tuple]:
    """``(param, values)`` leading from the easy end of a continuation case to
    the parameter value of ``problem``, or None for other problems."""
    spec = problem.spec
    if spec is None or getattr(spec, "builtin", None) is None:
        return None
    case = next((c for c in CASES.values() if c.builtin == spec.builtin and c.continuation), None)
    if case is None or case.param not in problem.params:
        return None
    start, target = float(case.grid[0]), float(problem.params[case.param])
    lo, hi = min(start, target), max(start, target)
    inner = [v for v in case.grid if lo < v < hi]
    values = [start] + (inner if target > start else sorted(inner, reverse=True)) + [target]
    if start == target:
        values = [target]
    return case.param, tuple(values)


def parse_grid(text: str) -> tuple:
    """``"a:b"`` gives the decades from ``a`` to ``b``; ``"a,b,c"`` a list."""
    text = text.strip()
    if ":" in text:
        a, b = (float(x) for x in text.split(":"))
        if a <= 0 or b <= 0:
            raise ValueError("decade ranges need positive endpoints")
        n = int(round(abs(math.log10(b / a)))) + 1
        return tuple(float(v) for v in np.geomspace(a, b, n))
    return tuple(float(x) for x in text.split(",") if x.strip())


@dataclass
class SweepTable:
    case: str
    param: str
    header: list
    rows: list
    reports: list = field(default_factory=list, repr=False)

    def sigmas(self) -> np.ndarray:
        i = self.header.index("sigma")
        return np.array([float(r[i]) for r in self.rows])

    def params(self) -> np.ndarray:
        return np.array([float(r[0]) for r in self.rows])

    def statuses(self) -> list:
        return [r[-1] for r in self.rows]

    def slope(self) -> float:
        """Least-squares slope of ``log sigma`` against ``log(1/param)`` over ok rows."""
        ok = [i for i, s in enumerate(self.statuses()) if s == "ok"]
        x = np.log(1.0 / np.abs(self.params()[ok]))
        y = np.log(self.sigmas()[ok])
        return float(np.polyfit(x, y, 1)[0])

    def write(self, path_or_buf) -> None:
        from .export import write_csv

        write_csv(path_or_buf, self.header, self.rows)


def _header(dim: int) -> list:
    return ["param", "kappa", "gamma", "sigma"] + [f"eta_star_{i + 1}" for i in range(dim)] + ["status"]


def _status(exc: BaseException) -> str:
    msg = " ".join(str(exc).split())
    return f"error: {type(exc).__name__}: {msg}"


def _failed_row(value, dim, status):
    return [value, math.nan, math.nan, math.nan] + [math.nan] * dim + [status]


def _sweep_point(case_name: str, value: float, options):
    from .analysis import analyze

    case = load_case(case_name)
    try:
        report = analyze(case.problem(value), options).report
    except (StiffkitError, ValueError, np.linalg.LinAlgError, FloatingPointError) as exc:
        return None, _status(exc)
    return report, "ok"


def run_sweep(case: BenchmarkCase, options=None, grid: Optional[Sequence[float]] = None,
              jobs: int = 1) -> SweepTable:
    """One conditioning report per grid point.

    Independent points run in up to ``jobs`` processes; nonlinear boundary
    value problems are chained by parameter continuation.  Failures are
    recorded in the status column and the sweep continues.
    """
    from .analysis import AnalysisOptions

    options = options or AnalysisOptions()
    grid = tuple(float(v) for v in (grid if grid is not None else case.grid))
    dim = case.problem().dim
    results: list = []
    if case.continuation:
        results = _continuation_sweep(case, grid, options)
    elif jobs > 1 and len(grid) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(_sweep_point, case.name, v, options) for v in grid]
            results = [f.result() for f in futures]
    else:
        results = [_sweep_point(case.name, v, options) for v in grid]
    rows, reports = [], []
    for value, (report, status) in zip(grid, results):
        reports.append(report)
        if report is None:
            rows.append(_failed_row(value, dim, status))
        else:
            rows.append(report.csv_row(value, status))
    return SweepTable(case.name, case.param, _header(dim), rows, reports)


def _continuation_sweep(case: BenchmarkCase, grid, options) -> list:
    from .analysis import analyze
    from .bvp import continue_in_parameter

    results: dict = {}

    def on_solution(value, trajectory):
        try:
            results[value] = (analyze(case.problem(value), options, trajectory=trajectory).report, "ok")
        except (StiffkitError, ValueError, np.linalg.LinAlgError) as exc:
            results[value] = (None, _status(exc))

    try:
        continue_in_parameter(case.problem(grid[0]), case.param, grid, tol=options.bvp_tol,
                              on_solution=on_solution)
    except ContinuationStall as exc:
        reason = _status(exc)
        for v in grid:
            results.setdefault(v, (None, reason))
    except ValueError as exc:
        for v in grid:
            results.setdefault(v, (None, _status(exc)))
    return [results[v] for v in grid]
