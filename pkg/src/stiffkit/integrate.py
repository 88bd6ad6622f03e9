"""One-step integrators, fixed and adaptive drivers, dense output and step maps.

Fixed-mesh methods: explicit Euler, implicit Euler, trapezoidal rule.  The
adaptive driver uses TR-BDF2 (trapezoidal stage followed by a BDF2 stage),
an L-stable second order ESDIRK pair with an embedded third order estimate.

Every step also returns its linear amplification ``R = d y_next / d y``.  For
implicit schemes it is obtained from the implicit function theorem at the
accepted stage values, so it is exact on linear problems.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import StepFailure, StiffnessPathologyError
from .problem import Problem

EXPLICIT_EULER = "explicit-euler"
IMPLICIT_EULER = "implicit-euler"
TRAPEZOIDAL = "trapezoidal"
ADAPTIVE_STIFF = "adaptive-stiff"
METHODS = (EXPLICIT_EULER, IMPLICIT_EULER, TRAPEZOIDAL, ADAPTIVE_STIFF)

# TR-BDF2 coefficients
GAMMA = 2.0 - math.sqrt(2.0)
D = GAMMA / 2.0
W = math.sqrt(2.0) / 4.0
B_HAT = np.array([(1.0 - W) / 3.0, (3.0 * W + 1.0) / 3.0, D / 3.0])
B_ERR = np.array([W, W, D]) - B_HAT

SAFETY = 0.9
FAC_MIN, FAC_MAX = 0.2, 5.0


@dataclass(frozen=True)
class MethodSpec:
    name: str = ADAPTIVE_STIFF
    newton_tol: float = 1e-10
    max_newton_iters: int = 12

    def __post_init__(self):
        if self.name not in METHODS:
            raise ValueError(f"unknown method {self.name!r}; choose from {', '.join(METHODS)}")
        if not self.newton_tol > 0 or self.max_newton_iters < 1:
            raise ValueError("newton_tol and max_newton_iters must be positive")


def amplification_factor(method: str, z: complex) -> complex:
    """Scalar amplification ``mu`` for ``y' = lambda y`` with ``z = h*lambda``."""
    if method == EXPLICIT_EULER:
        return 1.0 + z
    if method == IMPLICIT_EULER:
        return 1.0 / (1.0 - z)
    if method == TRAPEZOIDAL:
        return (1.0 + z / 2.0) / (1.0 - z / 2.0)
    if method == ADAPTIVE_STIFF:
        r2 = (1.0 + D * z) / (1.0 - D * z)
        return (1.0 + W * z + W * z * r2) / (1.0 - D * z)
    raise ValueError(f"unknown method {method!r}")


# --------------------------------------------------------------------------
# meshes and dense output


@dataclass(frozen=True)
class Mesh:
    nodes: np.ndarray

    def __post_init__(self):
        nodes = np.array(self.nodes, dtype=float)
        if nodes.ndim != 1 or nodes.size < 2:
            raise ValueError("a mesh needs at least two nodes")
        if not np.all(np.diff(nodes) > 0):
            raise ValueError("mesh nodes must be strictly increasing")
        if nodes[0] != 0.0:
            raise ValueError("mesh must start at t = 0")
        nodes.setflags(write=False)
        object.__setattr__(self, "nodes", nodes)

    @classmethod
    def uniform(cls, T: float, N: int) -> "Mesh":
        if N < 1:
            raise ValueError("N must be at least 1")
        nodes = np.linspace(0.0, T, N + 1)
        nodes[-1] = T
        return cls(nodes)

    @property
    def h(self) -> np.ndarray:
        return np.diff(self.nodes)

    @property
    def N(self) -> int:
        return self.nodes.size - 1

    @property
    def T(self) -> float:
        return float(self.nodes[-1])

    def bisect(self) -> "Mesh":
        mids = 0.5 * (self.nodes[:-1] + self.nodes[1:])
        out = np.empty(2 * self.N + 1)
        out[0::2] = self.nodes
        out[1::2] = mids
        return Mesh(out)


def hermite(nodes: np.ndarray, values: np.ndarray, derivs: np.ndarray, t) -> np.ndarray:
    """Piecewise cubic Hermite interpolation.

    ``values`` and ``derivs`` have shape ``(N+1, ...)``; the result has shape
    ``t.shape + values.shape[1:]``.  Node values are reproduced exactly.
    """
    t = np.asarray(t, dtype=float)
    scalar = t.ndim == 0
    tt = np.atleast_1d(t)
    idx = np.clip(np.searchsorted(nodes, tt, side="right") - 1, 0, nodes.size - 2)
    t0 = nodes[idx]
    h = nodes[idx + 1] - t0
    s = (tt - t0) / h
    extra = (1,) * (values.ndim - 1)
    s = s.reshape(s.shape + extra)
    hh = h.reshape(h.shape + extra)
    y0, y1 = values[idx], values[idx + 1]
    d0, d1 = derivs[idx], derivs[idx + 1]
    s2, s3 = s * s, s * s * s
    h00 = 2 * s3 - 3 * s2 + 1
    h10 = s3 - 2 * s2 + s
    h01 = -2 * s3 + 3 * s2
    h11 = s3 - s2
    out = h00 * y0 + h10 * hh * d0 + h01 * y1 + h11 * hh * d1
    exact = s == 0.0
    if np.any(exact):
        out = np.where(exact, y0, out)
    exact = s == 1.0
    if np.any(exact):
        out = np.where(exact, y1, out)
    return out[0] if scalar else out


@dataclass
class Trajectory:
    """Numerical solution on a mesh with cubic Hermite dense output."""

    mesh: Mesh
    states: np.ndarray  # (N+1, m)
    derivs: np.ndarray  # (N+1, m)
    method: str = ADAPTIVE_STIFF
    accepted: int = 0
    rejected: int = 0

    @property
    def t(self) -> np.ndarray:
        return self.mesh.nodes

    @property
    def T(self) -> float:
        return self.mesh.T

    def __call__(self, t):
        t_arr = np.asarray(t, dtype=float)
        if np.any(t_arr < 0.0) or np.any(t_arr > self.T):
            raise ValueError(f"query time outside [0, {self.T}]")
        return hermite(self.mesh.nodes, self.states, self.derivs, t_arr)

    def to_csv(self, path_or_buf) -> None:
        from .export import write_csv

        m = self.states.shape[1]
        header = ["t"] + [f"y{i + 1}" for i in range(m)]
        rows = [[t, *y] for t, y in zip(self.mesh.nodes, self.states)]
        write_csv(path_or_buf, header, rows)


@dataclass
class StepMap:
    """Per-step amplification matrices ``y_{n+1} = R_n y_n``."""

    mesh: Mesh
    matrices: np.ndarray  # (N, m, m)

    def product(self, n: Optional[int] = None) -> np.ndarray:
        n = self.matrices.shape[0] if n is None else n
        m = self.matrices.shape[1]
        P = np.eye(m)
        for R in self.matrices[:n]:
            P = R @ P
        return P

    def to_csv(self, path_or_buf) -> None:
        from .export import write_csv

        m = self.matrices.shape[1]
        header = ["n", "t", "h"] + [f"R{i + 1}{j + 1}" for i in range(m) for j in range(m)]
        rows = [[n, self.mesh.nodes[n], self.mesh.h[n], *R.ravel()]
                for n, R in enumerate(self.matrices)]
        write_csv(path_or_buf, header, rows)


# --------------------------------------------------------------------------
# single steps


class _NewtonFailure(Exception):
    pass


def _newton(problem: Problem, t: float, rhs: np.ndarray, c: float, guess: np.ndarray,
            tol: float, max_iters: int, scale: Optional[np.ndarray] = None):
    """Solve ``z - c f(t, z) = rhs`` by damped Newton with a fresh Jacobian each iteration."""
    m = problem.dim
    eye = np.eye(m)
    z = np.array(guess, dtype=float)
    fz = problem.f(t, z)
    G = z - c * fz - rhs
    for _ in range(max_iters):
        M = eye - c * problem.jac(t, z)
        try:
            dz = np.linalg.solve(M, -G)
        except np.linalg.LinAlgError:
            raise _NewtonFailure("singular Newton matrix") from None
        if not np.all(np.isfinite(dz)):
            raise _NewtonFailure("non-finite Newton update")
        g0 = np.max(np.abs(G))
        lam = 1.0
        while True:
            z_new = z + lam * dz
            f_new = problem.f(t, z_new)
            G_new = z_new - c * f_new - rhs
            if np.all(np.isfinite(G_new)) and (np.max(np.abs(G_new)) <= g0 or lam < 1e-3):
                break
            lam *= 0.5
        z, fz, G = z_new, f_new, G_new
        if scale is None:
            done = np.max(np.abs(lam * dz)) <= tol * (1.0 + np.max(np.abs(z)))
        else:
            done = np.max(np.abs(lam * dz) / scale) <= tol
        if done and np.all(np.isfinite(z)):
            return z, fz, eye - c * problem.jac(t, z)
    raise _NewtonFailure(f"Newton did not converge in {max_iters} iterations")


def step(method: MethodSpec, problem: Problem, t: float, y, h: float):
    """Advance one step of size ``h``; returns ``(y_next, R)``."""
    if not h > 0:
        raise ValueError("stepsize must be positive")
    y = np.asarray(y, dtype=float)
    m = problem.dim
    eye = np.eye(m)
    name = method.name
    if name == EXPLICIT_EULER:
        # an unstable explicit step may legitimately overflow to inf
        with np.errstate(over="ignore", invalid="ignore"):
            y_next = y + h * problem.f(t, y)
        return y_next, eye + h * problem.jac(t, y)
    if name == IMPLICIT_EULER:
        y_next, _, M = _newton(problem, t + h, y, h, y, method.newton_tol, method.max_newton_iters)
        return y_next, np.linalg.solve(M, eye)
    if name == TRAPEZOIDAL:
        f0 = problem.f(t, y)
        rhs = y + 0.5 * h * f0
        y_next, _, M = _newton(problem, t + h, rhs, 0.5 * h, y + h * f0 if np.all(np.isfinite(f0)) else y,
                               method.newton_tol, method.max_newton_iters)
        return y_next, np.linalg.solve(M, eye + 0.5 * h * problem.jac(t, y))
    if name == ADAPTIVE_STIFF:
        out = _trbdf2_step(_NonlinearSystem(problem, method), t, y, problem.f(t, y), h)
        return out.y_next, out.R
    raise ValueError(f"unknown method {name!r}")


def _step_or_fail(method, problem, t, y, h, index, partial):
    try:
        return step(method, problem, t, y, h)
    except _NewtonFailure as exc:
        raise StepFailure(f"step {index} at t={t:g} failed: {exc}", index=index,
                          trajectory=partial()) from None


def integrate_fixed(method: MethodSpec, problem: Problem, mesh: Mesh):
    """Apply ``method`` on every interval of ``mesh``; returns ``(Trajectory, StepMap)``."""
    if not problem.is_ivp:
        raise ValueError("integrate_fixed needs an initial value problem")
    if isinstance(method, str):
        method = MethodSpec(method)
    nodes = mesh.nodes
    m = problem.dim
    states = np.empty((nodes.size, m))
    states[0] = problem.eta
    Rs = np.empty((mesh.N, m, m))

    def partial_for(n):
        def build():
            sub = Mesh(nodes[: n + 1]) if n >= 1 else None
            if sub is None:
                return None
            derivs = np.array([problem.f(t, y) for t, y in zip(nodes[: n + 1], states[: n + 1])])
            return Trajectory(sub, states[: n + 1].copy(), derivs, method.name, accepted=n)
        return build

    for n in range(mesh.N):
        h = nodes[n + 1] - nodes[n]
        states[n + 1], Rs[n] = _step_or_fail(method, problem, nodes[n], states[n], h, n,
                                             partial_for(n))
    with np.errstate(all="ignore"):
        derivs = np.array([problem.f(t, y) for t, y in zip(nodes, states)])
    traj = Trajectory(mesh, states, derivs, method.name, accepted=mesh.N)
    return traj, StepMap(mesh, Rs)


# --------------------------------------------------------------------------
# adaptive TR-BDF2


@dataclass
class _StepResult:
    y_next: np.ndarray
    f_next: np.ndarray
    err: np.ndarray
    R: Optional[np.ndarray]


class _NonlinearSystem:
    """Stage solver for a nonlinear problem (Newton with exact Jacobian)."""

    def __init__(self, problem: Problem, method: MethodSpec, scale_fn=None):
        self.problem = problem
        self.method = method
        self.eye = np.eye(problem.dim)
        self.scale_fn = scale_fn

    def f(self, t, y):
        return self.problem.f(t, y)

    def jac(self, t, y):
        return self.problem.jac(t, y)

    def solve(self, t, c, rhs, guess):
        scale = None if self.scale_fn is None else self.scale_fn(guess)
        tol = self.method.newton_tol if scale is None else 1e-3
        return _newton(self.problem, t, rhs, c, guess, tol, self.method.max_newton_iters, scale)


class LinearSystem:
    """Stage solver for ``Y' = J(t) Y`` with a matrix (or vector) state."""

    def __init__(self, jac: Callable[[float], np.ndarray], dim: int):
        self._jac = jac
        self.eye = np.eye(dim)
        self._cache_t = None
        self._cache_J = None

    def jac(self, t, y=None):
        if t != self._cache_t:
            self._cache_t = t
            self._cache_J = self._jac(t)
        return self._cache_J

    def f(self, t, y):
        return self.jac(t) @ y

    def solve(self, t, c, rhs, guess):
        M = self.eye - c * self.jac(t)
        try:
            z = np.linalg.solve(M, rhs)
        except np.linalg.LinAlgError:
            raise _NewtonFailure("singular stage matrix") from None
        if not np.all(np.isfinite(z)):
            raise _NewtonFailure("non-finite stage value")
        return z, self.jac(t) @ z, M


def _trbdf2_step(system, t: float, y: np.ndarray, f0: np.ndarray, h: float,
                 want_R: bool = True) -> _StepResult:
    t2 = t + GAMMA * h
    t3 = t + h
    # trapezoidal stage on [t, t + gamma h]
    z2, k2, M2 = system.solve(t2, D * h, y + D * h * f0, y + GAMMA * h * f0)
    # BDF2 stage on [t, t + h]
    rhs3 = y + W * h * (f0 + k2)
    guess3 = y + (z2 - y) / GAMMA
    z3, k3, M3 = system.solve(t3, D * h, rhs3, guess3)
    err = h * (B_ERR[0] * f0 + B_ERR[1] * k2 + B_ERR[2] * k3)
    err = np.linalg.solve(M3, err)
    R = None
    if want_R:
        J1 = system.jac(t, y)
        J2 = system.jac(t2, z2)
        eye = system.eye
        Z2 = np.linalg.solve(M2, eye + D * h * J1)
        R = np.linalg.solve(M3, eye + W * h * (J1 + J2 @ Z2))
    return _StepResult(z3, k3, err, R)


@dataclass
class AdaptiveResult:
    times: np.ndarray
    states: np.ndarray
    derivs: np.ndarray
    R: Optional[np.ndarray]
    accepted: int
    rejected: int


def _initial_step(f0, y0, rtol, atol, T):
    scale = atol + rtol * np.abs(y0)
    d0 = np.max(np.abs(y0) / scale)
    d1 = np.max(np.abs(f0) / scale)
    if d0 < 1e-5 or d1 < 1e-5:
        h = 1e-6 * T
    else:
        h = 0.01 * d0 / d1
    return min(max(h, 1e-10 * T), 0.1 * T)


def solve_adaptive(system, T: float, y0: np.ndarray, rtol: float, atol: float,
                   breakpoints: Optional[Sequence[float]] = None, want_R: bool = True,
                   max_steps: int = 2_000_000) -> AdaptiveResult:
    """Drive TR-BDF2 over ``[0, T]`` with deterministic proportional control.

    ``breakpoints`` are times that must appear as step endpoints.
    """
    if not (rtol > 0 and atol > 0):
        raise ValueError("rtol and atol must be positive")
    y = np.array(y0, dtype=float)
    t = 0.0
    f0 = system.f(t, y)
    stops = np.unique(np.concatenate([np.asarray(breakpoints if breakpoints is not None else [], float), [T]]))
    stops = stops[(stops > 0) & (stops <= T)]
    stop_i = 0
    h = _initial_step(f0, y, rtol, atol, T)
    h_min = 1e-14 * T
    times, states, derivs, Rs = [0.0], [y], [f0], []
    accepted = rejected = 0
    while t < T:
        while stops[stop_i] <= t:
            stop_i += 1
        target = stops[stop_i]
        hit = False
        if t + h >= target or target - (t + h) < 1e-3 * h:
            h = target - t
            hit = True
        if h < h_min:
            raise StiffnessPathologyError(
                f"stepsize {h:.3e} below minimum {h_min:.3e} at t={t:.6g}", t)
        try:
            res = _trbdf2_step(system, t, y, f0, h, want_R=want_R)
        except (_NewtonFailure, np.linalg.LinAlgError):
            rejected += 1
            h *= 0.5
            continue
        scale = atol + rtol * np.maximum(np.abs(y), np.abs(res.y_next))
        with np.errstate(invalid="ignore", over="ignore"):
            err = float(np.max(np.abs(res.err) / scale))
        if not np.isfinite(err):
            rejected += 1
            h *= FAC_MIN
            continue
        fac = SAFETY * err ** (-1.0 / 3.0) if err > 0 else FAC_MAX
        if err <= 1.0:
            t = target if hit else t + h
            y, f0 = res.y_next, res.f_next
            times.append(t)
            states.append(y)
            derivs.append(f0)
            if want_R:
                Rs.append(res.R)
            accepted += 1
            if accepted > max_steps:
                raise StiffnessPathologyError(f"more than {max_steps} steps", t)
            h = h * min(FAC_MAX, max(FAC_MIN, fac))
        else:
            rejected += 1
            h = h * min(SAFETY, max(FAC_MIN, fac))
    return AdaptiveResult(np.array(times), np.array(states), np.array(derivs),
                          np.array(Rs) if want_R else None, accepted, rejected)


def integrate_adaptive(problem: Problem, rtol: float = 1e-8, atol: float = 1e-10,
                       breakpoints: Optional[Sequence[float]] = None):
    """Adaptive-stiff integration over ``[0, T]``; returns ``(Trajectory, StepMap)``."""
    if not problem.is_ivp:
        raise ValueError("integrate_adaptive needs an initial value problem")
    method = MethodSpec(ADAPTIVE_STIFF)

    def newton_scale(z):
        return atol + rtol * np.abs(z)

    system = _NonlinearSystem(problem, method, scale_fn=newton_scale)
    res = solve_adaptive(system, problem.T, np.asarray(problem.eta, float), rtol, atol,
                         breakpoints=breakpoints)
    mesh = Mesh(res.times)
    traj = Trajectory(mesh, res.states, res.derivs, ADAPTIVE_STIFF, res.accepted, res.rejected)
    return traj, StepMap(mesh, res.R)
