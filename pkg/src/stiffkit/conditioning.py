"""Conditioning parameters kappa, gamma and the stiffness ratio sigma.

All continuous quantities are computed from a FundamentalPath: the response
to boundary data ``eta`` is ``y(t) = Psi(t) eta`` with ``Psi = Phi Q^{-1}``
(``Psi = Phi`` for initial value problems).  Discrete quantities are computed
from sequences ``y_0 ... y_N`` on a mesh.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import DomainError
from .integrate import Mesh
from .problem import BoundaryCondition, validate_boundary
from .variational import FundamentalPath

NORMS = ("inf", "2")
DEFAULT_SEED = 42
DEFAULT_RANDOM_DIRECTIONS = 32
STIFF_THRESHOLD = 1e3
KAPPA_THRESHOLD = 1e8
UNIT_ROUNDOFF = np.finfo(float).eps / 2.0
MACHINE_PRECISION_GAMMA = 1e3 * UNIT_ROUNDOFF
GRID_RTOL = 1e-4
MAX_GRID_LEVEL = 6


def _check_norm(norm: str) -> str:
    if norm not in NORMS:
        raise ValueError(f"norm must be one of {NORMS}, got {norm!r}")
    return norm


def vector_norm(v: np.ndarray, norm: str = "inf", axis: int = -1) -> np.ndarray:
    if _check_norm(norm) == "inf":
        return np.max(np.abs(v), axis=axis)
    return np.sqrt(np.sum(v * v, axis=axis))


def matrix_norm(M: np.ndarray, norm: str = "inf") -> np.ndarray:
    """Induced norm of each matrix in a ``(..., m, m)`` stack."""
    if _check_norm(norm) == "inf":
        return np.max(np.sum(np.abs(M), axis=-1), axis=-1)
    return np.linalg.norm(M, ord=2, axis=(-2, -1))


def resolve_seed(seed: Optional[int] = None) -> int:
    """Explicit seed, else ``STIFFKIT_SEED`` from the environment, else 42."""
    if seed is not None:
        return int(seed)
    env = os.environ.get("STIFFKIT_SEED")
    return int(env) if env else DEFAULT_SEED


# --------------------------------------------------------------------------
# directions


@dataclass
class DirectionSet:
    """Perturbation directions, each normalized in the report norm."""

    vectors: np.ndarray  # (k, m)
    labels: list
    norm: str = "inf"

    def __len__(self) -> int:
        return self.vectors.shape[0]

    @classmethod
    def build(cls, dim: int, random: int = DEFAULT_RANDOM_DIRECTIONS, seed: Optional[int] = None,
              jac0: Optional[np.ndarray] = None, user: Sequence = (), norm: str = "inf"):
        vecs, labels = [], []

        def add(v, label):
            v = np.asarray(v, dtype=float)
            n = float(vector_norm(v, norm))
            if v.shape != (dim,) or not np.isfinite(n) or n == 0.0:
                return
            vecs.append(v / n)
            labels.append(label)

        for i in range(dim):
            e = np.zeros(dim)
            e[i] = 1.0
            add(e, f"+e{i + 1}")
            add(-e, f"-e{i + 1}")
        rng = np.random.default_rng(resolve_seed(seed))
        for k in range(random):
            add(rng.standard_normal(dim), f"random{k + 1}")
        if jac0 is not None and np.all(np.isfinite(jac0)):
            w, V = np.linalg.eig(np.asarray(jac0, dtype=float))
            for rank, i in enumerate(np.argsort(-np.abs(w), kind="stable")):
                add(V[:, i].real, f"eig{rank + 1}.re")
                if abs(w[i].imag) > 0:
                    add(V[:, i].imag, f"eig{rank + 1}.im")
        for k, u in enumerate(user):
            add(u, f"user{k + 1}")
        if not vecs:
            raise DomainError("direction set is empty")
        return cls(np.array(vecs), labels, norm)


# --------------------------------------------------------------------------
# continuous parameters


def _responses(values: np.ndarray, etas: np.ndarray, norm: str) -> np.ndarray:
    """``||Psi(t) eta_k|| / ||eta_k||`` on a grid, shape ``(n, k)``."""
    Y = values @ etas.T  # (n, m, k)
    return vector_norm(Y, norm, axis=1) / vector_norm(etas, norm)[None, :]


def _trapezoid(ts: np.ndarray, w: np.ndarray) -> np.ndarray:
    h = np.diff(ts)
    return np.tensordot(h, 0.5 * (w[:-1] + w[1:]), axes=(0, 0))


def _grid_level(path: FundamentalPath, fn, level: int, columns: int):
    """Max and mean of ``fn(values)`` over the level-``level`` Hermite grid."""
    max_points = max(1024, (1 << 22) // max(1, columns * path.dim * path.dim))
    peak, total = None, 0.0
    for ts, vals in path.iter_grid(level, max_points):
        w = fn(vals)
        total = total + _trapezoid(ts, w)
        p = np.max(w, axis=0)
        peak = p if peak is None else np.maximum(peak, p)
    return peak, total / path.T


def _grid_integrals(path: FundamentalPath, fn, rtol: float = GRID_RTOL, columns: int = 1):
    """Max and mean of ``fn(values)`` on Hermite grids refined until the
    trapezoid mean changes by less than ``rtol`` between levels."""
    peak, mean = _grid_level(path, fn, 1, columns)
    for level in range(2, MAX_GRID_LEVEL + 1):
        new_peak, new_mean = _grid_level(path, fn, level, columns)
        peak = np.maximum(peak, new_peak)
        change = np.max(np.abs(new_mean - mean) / np.maximum(np.abs(new_mean), 1e-300))
        mean = new_mean
        if change < rtol:
            break
    return peak, mean


def kappa_gamma_many(path: FundamentalPath, etas: np.ndarray, norm: str = "inf"):
    """``(kappa, gamma)`` arrays for each row of ``etas``."""
    etas = np.atleast_2d(np.asarray(etas, dtype=float))
    if np.any(vector_norm(etas, norm) == 0.0):
        raise DomainError("eta must be nonzero")
    return _grid_integrals(path, lambda vals: _responses(vals, etas, norm), columns=etas.shape[0])


def kappa_gamma_continuous(path: FundamentalPath, eta, norm: str = "inf") -> tuple[float, float]:
    """``kappa(T, eta) = max ||y||/||eta||`` and ``gamma(T, eta) = (1/T) int ||y|| / ||eta||``."""
    eta = np.asarray(eta, dtype=float)
    if eta.shape != (path.dim,):
        raise DomainError(f"eta must have shape ({path.dim},)")
    kappa, gamma = kappa_gamma_many(path, eta[None, :], norm)
    return float(kappa[0]), float(gamma[0])


def gamma_oscillatory(lam: complex, T: float) -> float:
    """``1/(|lambda| T)``; the ``lambda = 0`` convention gives 1."""
    if lam == 0:
        return 1.0
    return 1.0 / (abs(lam) * T)


def scalar_closed_form(lam: complex, T: float) -> tuple[float, float]:
    """Closed-form ``(kappa, gamma)`` for ``y' = lambda y`` with real ``lambda``."""
    a = float(np.real(lam))
    if a == 0.0:
        return 1.0, 1.0
    kappa = max(1.0, math.exp(a * T))
    return kappa, -math.expm1(a * T) / (-a * T) if a < 0 else math.expm1(a * T) / (a * T)


# --------------------------------------------------------------------------
# reports


@dataclass
class Flags:
    stiff: bool = False
    ill_conditioned: bool = False
    oscillatory_variant_used: bool = False
    machine_precision_reached: bool = False


@dataclass
class DirectionResult:
    label: str
    eta: np.ndarray
    kappa: float
    gamma: float

    @property
    def sigma(self) -> float:
        return self.kappa / self.gamma


@dataclass
class ConditioningReport:
    kappa: float  # max over directions
    gamma: float  # max over directions
    sigma: float  # max over directions of kappa/gamma
    eta_star: np.ndarray
    kappa_star: float  # kappa and gamma at eta_star
    gamma_star: float
    T: float
    per_direction: list = field(default_factory=list)
    flags: Flags = field(default_factory=Flags)
    norm: str = "inf"
    problem: str = ""
    dichotomy: Optional["DichotomyReport"] = None
    hill_climb_steps: int = 0

    @property
    def transient_time(self) -> float:
        return self.T / self.sigma

    def to_text(self) -> str:
        lines = [
            f"problem = {self.problem}",
            f"norm = {self.norm}",
            f"T = {_f(self.T)}",
            f"kappa = {_f(self.kappa)}",
            f"gamma = {_f(self.gamma)}",
            f"sigma = {_f(self.sigma)}",
            f"kappa_at_eta_star = {_f(self.kappa_star)}",
            f"gamma_at_eta_star = {_f(self.gamma_star)}",
            f"eta_star = [{', '.join(_f(v) for v in self.eta_star)}]",
            f"transient_time = {_f(self.transient_time)}",
            f"stiff = {_b(self.flags.stiff)}",
            f"ill_conditioned = {_b(self.flags.ill_conditioned)}",
            f"oscillatory_variant_used = {_b(self.flags.oscillatory_variant_used)}",
        ]
        if self.dichotomy is not None:
            lines.append(f"dichotomy = {self.dichotomy.verdict}")
            lines.append(f"dichotomy_detail = {self.dichotomy.describe()}")
        lines.append(f"directions = {len(self.per_direction)}")
        for d in self.per_direction:
            lines.append(f"direction {d.label}: kappa = {_f(d.kappa)}, gamma = {_f(d.gamma)}, "
                         f"sigma = {_f(d.sigma)}")
        return "\n".join(lines) + "\n"

    def csv_header(self) -> list:
        return (["param", "kappa", "gamma", "sigma"]
                + [f"eta_star_{i + 1}" for i in range(self.eta_star.size)] + ["status"])

    def csv_row(self, param, status: str = "ok") -> list:
        return [param, self.kappa, self.gamma, self.sigma, *self.eta_star, status]


def _f(x) -> str:
    from .export import fmt

    return fmt(float(x))


def _b(x: bool) -> str:
    return "true" if x else "false"


def classify(report: ConditioningReport, threshold: float = STIFF_THRESHOLD,
             kappa_threshold: float = KAPPA_THRESHOLD) -> Flags:
    """Stiff when sigma reaches ``threshold``; ill conditioned when kappa exceeds ``kappa_threshold``."""
    flags = report.flags
    flags.stiff = bool(report.sigma >= threshold)
    flags.ill_conditioned = bool(report.kappa > kappa_threshold)
    return flags


def _sigma(kappa, gamma):
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(gamma > 0, kappa / gamma, np.inf)


def maximize_sigma(path: FundamentalPath, directions: DirectionSet, hill_climb: bool = True,
                   max_iterations: int = 20, step: float = 0.1,
                   threshold: float = STIFF_THRESHOLD,
                   kappa_threshold: float = KAPPA_THRESHOLD) -> ConditioningReport:
    """Evaluate every direction, keep the one with the largest ``kappa/gamma``
    (lowest index on ties) and improve it by coordinate-wise perturbations."""
    norm = directions.norm
    etas = directions.vectors
    kappa, gamma = kappa_gamma_many(path, etas, norm)
    sig = _sigma(kappa, gamma)
    best = int(np.argmax(sig))
    per = [DirectionResult(lab, e, float(k), float(g))
           for lab, e, k, g in zip(directions.labels, etas, kappa, gamma)]
    eta_star, k_star, g_star, s_star = etas[best].copy(), kappa[best], gamma[best], sig[best]
    steps = 0
    if hill_climb:
        m = path.dim
        for _ in range(max_iterations):
            scale = float(vector_norm(eta_star, norm))
            cands = []
            for i in range(m):
                delta = step * max(abs(eta_star[i]), 1e-3 * scale)
                for sign in (1.0, -1.0):
                    c = eta_star.copy()
                    c[i] += sign * delta
                    cands.append(c / vector_norm(c, norm))
            cands = np.array(cands)
            ck, cg = kappa_gamma_many(path, cands, norm)
            cs = _sigma(ck, cg)
            j = int(np.argmax(cs))
            if not cs[j] > s_star * (1.0 + 1e-12):
                break
            eta_star, k_star, g_star, s_star = cands[j], ck[j], cg[j], cs[j]
            steps += 1
    report = ConditioningReport(
        kappa=float(max(np.max(kappa), k_star)), gamma=float(max(np.max(gamma), g_star)),
        sigma=float(s_star), eta_star=eta_star, kappa_star=float(k_star), gamma_star=float(g_star),
        T=path.T, per_direction=per, norm=norm, hill_climb_steps=steps)
    classify(report, threshold, kappa_threshold)
    return report


def oscillatory_report(lam: complex, T: float, threshold: float = STIFF_THRESHOLD,
                       kappa_threshold: float = KAPPA_THRESHOLD) -> ConditioningReport:
    """Scalar report with ``gamma = 1/(|lambda| T)`` for oscillatory ``lambda``."""
    kappa = max(1.0, math.exp(float(np.real(lam)) * T))
    gamma = gamma_oscillatory(lam, T)
    report = ConditioningReport(kappa=kappa, gamma=gamma, sigma=kappa / gamma,
                                eta_star=np.array([1.0]), kappa_star=kappa, gamma_star=gamma, T=T,
                                per_direction=[DirectionResult("+e1", np.array([1.0]), kappa, gamma)])
    report.flags.oscillatory_variant_used = True
    classify(report, threshold, kappa_threshold)
    return report


# --------------------------------------------------------------------------
# bounds


def sigma_upper_bounds(path: FundamentalPath, norm: str = "inf") -> tuple[float, float]:
    """``max ||Psi(t)||`` and ``(1/T) int ||Psi(t)|| dt`` in the induced norm."""
    peak, mean = _grid_integrals(path, lambda vals: matrix_norm(vals, norm)[:, None])
    return float(peak[0]), float(mean[0])


# --------------------------------------------------------------------------
# discrete parameters


@dataclass
class DiscreteResult:
    kappa: float
    gamma: float
    machine_precision_reached: bool

    @property
    def sigma(self) -> float:
        return self.kappa / self.gamma if self.gamma > 0 else math.inf


def kappa_gamma_discrete(states, mesh: Mesh, eta, norm: str = "inf",
                         gamma_mp: float = MACHINE_PRECISION_GAMMA) -> DiscreteResult:
    """``kappa_d = max_n ||y_n|| / ||eta||`` and
    ``gamma_d = sum_i h_i max(||y_i||, ||y_{i-1}||) / (T ||eta||)``."""
    Y = np.asarray(states, dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None]
    eta_n = float(vector_norm(np.atleast_1d(np.asarray(eta, dtype=float)), norm))
    if eta_n == 0.0:
        raise DomainError("eta must be nonzero")
    if Y.shape[0] != mesh.nodes.size:
        raise ValueError(f"{Y.shape[0]} states for a mesh with {mesh.nodes.size} nodes")
    with np.errstate(over="ignore", invalid="ignore"):
        r = vector_norm(Y, norm, axis=1)
        kappa = float(np.max(r)) / eta_n
        gamma = float(np.sum(mesh.h * np.maximum(r[1:], r[:-1]))) / (mesh.T * eta_n)
    return DiscreteResult(kappa, gamma, bool(gamma < gamma_mp))


@dataclass
class Verdict:
    kappa_ok: bool
    gamma_ok: bool
    kappa_ratio: float  # |log(kappa_d / kappa_c)|
    gamma_ratio: float  # |log(gamma_d / gamma_c)|

    @property
    def passed(self) -> bool:
        return self.kappa_ok and self.gamma_ok

    @property
    def failed(self) -> list:
        return [name for name, ok in (("wr1", self.kappa_ok), ("wr2", self.gamma_ok)) if not ok]


def _log_ratio(a: float, b: float) -> float:
    if a == b:
        return 0.0
    if not (a > 0 and b > 0) or not (math.isfinite(a) and math.isfinite(b)):
        return math.inf
    return abs(math.log(a / b))


def well_represented(kappa_c: float, gamma_c: float, kappa_d: float, gamma_d: float,
                     tol_factor: float = 2.0) -> Verdict:
    """Both ratios ``kappa_d/kappa_c`` and ``gamma_d/gamma_c`` within ``tol_factor``."""
    bound = math.log(tol_factor)
    rk = _log_ratio(kappa_d, kappa_c)
    rg = _log_ratio(gamma_d, gamma_c)
    return Verdict(rk <= bound, rg <= bound, rk, rg)


# --------------------------------------------------------------------------
# dichotomy / matching rules


@dataclass
class DichotomyReport:
    negative: int
    positive: int
    marginal: int
    rank_b0: int
    rank_b1: int
    verdict: str  # "matched" | "mismatch" | "indeterminate"
    frozen: bool = False
    discrete: bool = False

    def describe(self) -> str:
        kind = "inside/outside unit disk" if self.discrete else "negative/positive real part"
        note = " (frozen Jacobian)" if self.frozen else ""
        return (f"{self.negative}/{self.positive} eigenvalues {kind}, {self.marginal} marginal; "
                f"rank B0 = {self.rank_b0}, rank B1 = {self.rank_b1}{note}")


def _verdict(neg, pos, marginal, r0, r1) -> str:
    if marginal:
        return "indeterminate"
    return "matched" if (neg == r0 and pos == r1) else "mismatch"


def check_dichotomy(A, bc: BoundaryCondition, frozen: bool = False) -> DichotomyReport:
    """Continuous matching rule: decaying modes against rank(B0), growing
    modes against rank(B1).  ``A`` may be a matrix or a FundamentalPath (its
    Jacobian at t=0 is used and the report is marked as frozen)."""
    if isinstance(A, FundamentalPath):
        A, frozen = A.jac0, True
    A = np.asarray(A, dtype=float)
    ranks = validate_boundary(bc)
    w = np.linalg.eigvals(A)
    band = 1e-10 * max(np.linalg.norm(A, np.inf), 1e-300)
    marginal = int(np.sum(np.abs(w.real) < band))
    neg = int(np.sum(w.real <= -band))
    pos = int(np.sum(w.real >= band))
    return DichotomyReport(neg, pos, marginal, ranks.rank_b0, ranks.rank_b1,
                           _verdict(neg, pos, marginal, ranks.rank_b0, ranks.rank_b1), frozen)


def check_dichotomy_discrete(matrices, bc: BoundaryCondition, rtol: float = 1e-10) -> DichotomyReport:
    """Discrete matching rule on the total amplification ``R_{N-1} ... R_0``.

    The product is renormalized at every step, so eigenvalue magnitudes are
    compared in log scale and neither overflow nor underflow.
    """
    ranks = validate_boundary(bc)
    matrices = np.asarray(matrices, dtype=float)
    m = matrices.shape[-1]
    P = np.eye(m)
    log_scale = 0.0
    for R in matrices:
        P = R @ P
        s = np.max(np.abs(P))
        if s == 0 or not np.isfinite(s):
            break
        P /= s
        log_scale += math.log(s)
    w = np.linalg.eigvals(P)
    with np.errstate(divide="ignore"):
        logmag = np.log(np.abs(w)) + log_scale
    band = rtol * max(1.0, abs(log_scale))
    inside = int(np.sum(logmag < -band))
    outside = int(np.sum(logmag > band))
    marginal = m - inside - outside
    return DichotomyReport(inside, outside, marginal, ranks.rank_b0, ranks.rank_b1,
                           _verdict(inside, outside, marginal, ranks.rank_b0, ranks.rank_b1),
                           discrete=True)
