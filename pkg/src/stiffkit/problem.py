"""Problem model: right-hand side, interval, boundary conditions, parameters.

Problems are posed on ``[0, T]``.  Problem files on ``[a, b]`` are shifted by
the loader so that the model time ``t`` corresponds to ``a + t``.

Problem files are TOML documents; see ``docs/problem-files.md``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from . import expr
from .errors import DomainError, ProblemError, ShapeError, StructuralError

try:  # pragma: no cover - depends on interpreter version
    import tomllib
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib
import tomli_w

IVP = "ivp"
BVP = "bvp"


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=float)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class BoundaryCondition:
    """``B0 y(0) + B1 y(T) = eta``."""

    B0: np.ndarray
    B1: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "B0", _frozen(self.B0))
        object.__setattr__(self, "B1", _frozen(self.B1))

    @classmethod
    def initial(cls, dim: int) -> "BoundaryCondition":
        return cls(np.eye(dim), np.zeros((dim, dim)))

    @property
    def dim(self) -> int:
        return self.B0.shape[0]

    @property
    def is_initial(self) -> bool:
        return bool(np.array_equal(self.B0, np.eye(self.dim)) and not self.B1.any())


@dataclass(frozen=True)
class RankReport:
    rank: int
    rank_b0: int
    rank_b1: int
    dim: int

    @property
    def valid(self) -> bool:
        return self.rank == self.dim

    @property
    def separated(self) -> bool:
        return self.rank_b0 + self.rank_b1 == self.dim


def validate_boundary(bc: BoundaryCondition) -> RankReport:
    """Ranks of ``[B0 B1]``, ``B0`` and ``B1``; raises if conditions are deficient."""
    B0, B1 = np.asarray(bc.B0), np.asarray(bc.B1)
    if B0.ndim != 2 or B0.shape[0] != B0.shape[1]:
        raise ShapeError(f"B0 must be square, got shape {B0.shape}")
    if B1.shape != B0.shape:
        raise ShapeError(f"B1 shape {B1.shape} does not match B0 shape {B0.shape}")
    m = B0.shape[0]
    report = RankReport(
        rank=int(np.linalg.matrix_rank(np.hstack([B0, B1]))) if m else 0,
        rank_b0=int(np.linalg.matrix_rank(B0)) if B0.any() else 0,
        rank_b1=int(np.linalg.matrix_rank(B1)) if B1.any() else 0,
        dim=m,
    )
    if not report.valid:
        raise StructuralError(
            f"boundary conditions have rank {report.rank} < {m}: problem is under-determined")
    return report


@dataclass(frozen=True)
class LinearTV:
    """Linear right-hand side ``y' = A(t) y``."""

    A: Callable[[float], np.ndarray]
    constant: bool = False


@dataclass(frozen=True)
class Problem:
    name: str
    dim: int
    rhs: Callable  # f(t, y, params) -> ndarray (dim,)
    T: float
    kind: str = IVP
    boundary: Optional[BoundaryCondition] = None
    params: Mapping[str, float] = field(default_factory=dict)
    eta: Optional[np.ndarray] = None
    jacobian: Optional[Callable] = None  # J(t, y, params) -> ndarray (dim, dim)
    linear: Optional[LinearTV] = None
    perturbations: tuple = ()
    t_offset: float = 0.0
    spec: Optional["ProblemSpec"] = None

    def __post_init__(self):
        if self.boundary is None:
            object.__setattr__(self, "boundary", BoundaryCondition.initial(self.dim))
        object.__setattr__(self, "params", MappingProxyType(dict(self.params)))
        if self.eta is not None:
            object.__setattr__(self, "eta", _frozen(self.eta))
        object.__setattr__(self, "perturbations",
                           tuple(_frozen(p) for p in self.perturbations))

    def f(self, t: float, y) -> np.ndarray:
        return np.asarray(self.rhs(t, y, self.params), dtype=float)

    def jac(self, t: float, y) -> np.ndarray:
        """Jacobian of the right-hand side; central differences when none is given."""
        if self.linear is not None:
            return np.asarray(self.linear.A(t), dtype=float)
        if self.jacobian is not None:
            return np.asarray(self.jacobian(t, y, self.params), dtype=float)
        return fd_jacobian(self.f, t, y)

    @property
    def is_ivp(self) -> bool:
        return self.kind == IVP

    def with_params(self, **updates) -> "Problem":
        """Rebuild from the originating spec with some parameters replaced."""
        if self.spec is None:
            raise ProblemError(f"problem {self.name!r} has no spec to rebuild from")
        params = dict(self.spec.params)
        params.update(updates)
        return build_problem(self.spec.replace(params=params))


def fd_jacobian(f: Callable, t: float, y, rel_step: float = 1e-7) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    m = y.size
    J = np.empty((m, m))
    for i in range(m):
        h = rel_step * (1.0 + abs(y[i]))
        yp, ym = y.copy(), y.copy()
        yp[i] += h
        ym[i] -= h
        J[:, i] = (f(t, yp) - f(t, ym)) / (2.0 * h)
    return J


# --------------------------------------------------------------------------
# declarative problem description


@dataclass(frozen=True)
class ProblemSpec:
    """Declarative problem description, as read from a problem file.

    Either ``builtin`` names a benchmark problem (``params`` and ``T``
    override its defaults) or ``rhs`` holds one expression per component.
    """

    name: str = ""
    builtin: Optional[str] = None
    dim: Optional[int] = None
    rhs: tuple = ()
    jacobian: Optional[tuple] = None
    interval: Optional[tuple] = None
    kind: str = IVP
    B0: Optional[tuple] = None
    B1: Optional[tuple] = None
    params: Mapping[str, float] = field(default_factory=dict)
    eta: Optional[tuple] = None
    perturbations: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "params", MappingProxyType(
            {k: float(v) for k, v in dict(self.params).items()}))

    def replace(self, **changes) -> "ProblemSpec":
        values = {f: getattr(self, f) for f in self.__dataclass_fields__}
        values.update(changes)
        return ProblemSpec(**values)

    def __eq__(self, other):
        if not isinstance(other, ProblemSpec):
            return NotImplemented
        return self.to_dict() == other.to_dict()

    def __hash__(self):
        return hash(dumps_spec(self))

    def to_dict(self) -> dict:
        out: dict = {}
        if self.name:
            out["name"] = self.name
        if self.builtin is not None:
            out["builtin"] = self.builtin
        if self.dim is not None:
            out["dim"] = int(self.dim)
        if self.rhs:
            out["rhs"] = list(self.rhs)
        if self.jacobian is not None:
            out["jacobian"] = [list(row) for row in self.jacobian]
        if self.interval is not None:
            out["interval"] = [float(v) for v in self.interval]
        out["kind"] = self.kind
        for key in ("B0", "B1"):
            mat = getattr(self, key)
            if mat is not None:
                out[key] = [[float(v) for v in row] for row in mat]
        if self.params:
            out["params"] = dict(self.params)
        if self.eta is not None:
            out["eta"] = [float(v) for v in self.eta]
        if self.perturbations:
            out["perturbations"] = [[float(v) for v in p] for p in self.perturbations]
        return out

    @classmethod
    def from_dict(cls, data: Mapping) -> "ProblemSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ProblemError(f"unknown problem field(s): {', '.join(sorted(unknown))}")

        def matrix(v):
            return None if v is None else tuple(tuple(float(x) for x in row) for row in v)

        def vector(v):
            return None if v is None else tuple(float(x) for x in v)

        kind = str(data.get("kind", IVP)).lower()
        if kind not in (IVP, BVP):
            raise ProblemError(f"kind must be 'ivp' or 'bvp', got {kind!r}")
        jac = data.get("jacobian")
        return cls(
            name=str(data.get("name", "")),
            builtin=data.get("builtin"),
            dim=None if data.get("dim") is None else int(data["dim"]),
            rhs=tuple(str(s) for s in data.get("rhs", ())),
            jacobian=None if jac is None else tuple(tuple(str(s) for s in row) for row in jac),
            interval=vector(data.get("interval")),
            kind=kind,
            B0=matrix(data.get("B0")),
            B1=matrix(data.get("B1")),
            params=dict(data.get("params", {})),
            eta=vector(data.get("eta")),
            perturbations=tuple(vector(p) for p in data.get("perturbations", ())),
        )


def loads_spec(text: str) -> ProblemSpec:
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ProblemError(f"malformed problem file: {exc}") from None
    return ProblemSpec.from_dict(data)


def dumps_spec(spec: ProblemSpec) -> str:
    return tomli_w.dumps(spec.to_dict())


def load_spec(path) -> ProblemSpec:
    with open(path, "rb") as fh:
        raw = fh.read()
    return loads_spec(raw.decode("utf-8"))


def save_spec(spec: ProblemSpec, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps_spec(spec))


# --------------------------------------------------------------------------


def _shift_time(node: expr.Node, offset: float) -> expr.Node:
    if offset == 0.0:
        return node
    if isinstance(node, expr.Var):
        if node.name == "t":
            return expr.add(node, expr._const(offset))
        return node
    if isinstance(node, expr.Const):
        return node
    if isinstance(node, expr.Neg):
        return expr.Neg(_shift_time(node.arg, offset))
    if isinstance(node, expr.Call):
        return expr.Call(node.func, _shift_time(node.arg, offset))
    return expr.BinOp(node.op, _shift_time(node.left, offset), _shift_time(node.right, offset))


def build_problem(spec: ProblemSpec) -> Problem:
    """Validate ``spec`` and turn it into a Problem.

    Expression right-hand sides are parsed and compiled once.  A missing
    Jacobian is derived symbolically.
    """
    if spec.builtin is not None:
        from .suite import build_builtin

        return build_builtin(spec)

    if not spec.rhs:
        raise ProblemError("problem needs either 'builtin' or 'rhs'")
    dim = spec.dim if spec.dim is not None else len(spec.rhs)
    if dim < 1:
        raise DomainError("dim must be at least 1")
    if len(spec.rhs) != dim:
        raise ShapeError(f"rhs has {len(spec.rhs)} components but dim = {dim}")
    if spec.interval is None or len(spec.interval) != 2:
        raise ProblemError("interval = [a, b] is required")
    a, b = spec.interval
    T = b - a
    if not T > 0:
        raise DomainError(f"interval length must be positive, got [{a}, {b}]")
    if spec.eta is None:
        raise ProblemError("eta (boundary/initial data) is required")
    if len(spec.eta) != dim:
        raise ShapeError(f"eta has {len(spec.eta)} entries but dim = {dim}")

    names = list(spec.params)
    asts = []
    for i, source in enumerate(spec.rhs):
        try:
            asts.append(_shift_time(expr.parse(source, dim=dim, params=names), a))
        except expr.ExprError as exc:
            raise ProblemError(f"rhs[{i}]: {exc}") from exc
    if spec.jacobian is not None:
        if len(spec.jacobian) != dim or any(len(row) != dim for row in spec.jacobian):
            raise ShapeError(f"jacobian must be {dim}x{dim}")
        jac_asts = []
        for i, row in enumerate(spec.jacobian):
            for j, source in enumerate(row):
                try:
                    jac_asts.append(_shift_time(expr.parse(source, dim=dim, params=names), a))
                except expr.ExprError as exc:
                    raise ProblemError(f"jacobian[{i}][{j}]: {exc}") from exc
    else:
        jac_asts = [expr.differentiate(node, f"y{j + 1}") for node in asts for j in range(dim)]
    rhs = expr.compile_nodes(asts)
    jacobian = expr.compile_nodes(jac_asts, shape=(dim, dim))

    if spec.kind == IVP:
        if spec.B0 is not None or spec.B1 is not None:
            bc = BoundaryCondition(spec.B0 if spec.B0 is not None else np.eye(dim),
                                   spec.B1 if spec.B1 is not None else np.zeros((dim, dim)))
            if not bc.is_initial:
                raise ProblemError("an IVP must use B0 = I and B1 = 0")
        bc = BoundaryCondition.initial(dim)
    else:
        if spec.B0 is None or spec.B1 is None:
            raise ProblemError("a BVP needs both B0 and B1")
        bc = BoundaryCondition(spec.B0, spec.B1)
    if bc.B0.shape != (dim, dim):
        raise ShapeError(f"B0/B1 must be {dim}x{dim}")
    validate_boundary(bc)

    for p in spec.perturbations:
        if len(p) != dim or not any(p):
            raise ProblemError("perturbation directions must be nonzero vectors of length dim")

    problem = Problem(
        name=spec.name or "user",
        dim=dim,
        rhs=rhs,
        T=float(T),
        kind=spec.kind,
        boundary=bc,
        params=spec.params,
        eta=np.array(spec.eta),
        jacobian=jacobian,
        perturbations=spec.perturbations,
        t_offset=float(a),
        spec=spec,
    )
    check_evaluable(problem)
    return problem


def reference_state(problem: Problem) -> np.ndarray:
    """State at t=0 used to sanity-check the rhs: eta for IVPs, the
    minimum-norm left boundary value for BVPs."""
    if problem.is_ivp:
        return np.array(problem.eta, dtype=float)
    ya, _ = boundary_projection(problem.boundary, problem.eta)
    return ya


def boundary_projection(bc: BoundaryCondition, eta) -> tuple[np.ndarray, np.ndarray]:
    """Minimum-norm ``(y_a, y_b)`` with ``B0 y_a + B1 y_b = eta``."""
    m = bc.dim
    sol, *_ = np.linalg.lstsq(np.hstack([bc.B0, bc.B1]), np.asarray(eta, float), rcond=None)
    return sol[:m], sol[m:]


def check_evaluable(problem: Problem) -> None:
    y0 = reference_state(problem)
    value = problem.f(0.0, y0)
    if value.shape != (problem.dim,):
        raise ShapeError(f"rhs returned shape {value.shape}, expected ({problem.dim},)")
    if not np.all(np.isfinite(value)):
        raise DomainError(f"rhs is not finite at t=0, y={y0.tolist()}")
