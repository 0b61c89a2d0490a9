"""Proximal splitting solver for the GME-regularized convex model.

The model is::

    minimize_{Cmap x in C}  f(A x) + mu * psi_B(L x)

and is solved by iterating an averaged nonexpansive operator ``T`` on the
product space ``X x Z x Z x W`` (``W`` being the range of ``Cmap``). The
first block of any fixed point of ``T`` is a global minimizer.
"""
from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from . import linops
from .fidelity import ClippedGaussianNLL, ExtendedFidelity, QuadraticFidelity, SmoothFidelity
from .gme import GmeRegularizer, gme_value
from .linops import DENSE_CAP, DiagnosticUnavailable, LinearMap
from .proxlib import BoxIndicator

__all__ = [
    "NrcProblem",
    "StepParams",
    "SolverState",
    "SolveResult",
    "ParameterSelectionError",
    "ExistenceReport",
    "grad_d",
    "d_value",
    "objective",
    "compute_rho",
    "choose_sigma_tau",
    "p_norm_sq",
    "p_matrix_dense",
    "apply_T",
    "km_solve",
    "existence_diagnostics",
    "is_coercive",
]

logger = logging.getLogger(__name__)

SIGMA_FACTOR = 1.001
DEFAULT_KAPPA = 5.0
DEFAULT_TOL_SQ = 1e-4
DEFAULT_MAX_ITER = 200_000


class ParameterSelectionError(RuntimeError):
    """Step parameters violate the averagedness conditions (internal invariant)."""


@dataclass(frozen=True)
class ProblemNorms:
    """Operator-norm upper bounds entering the step-size rule."""

    A_sq: float  # ||A||^2
    LC: float  # ||L*L + Cmap*Cmap||
    BBL_sq: float  # ||B*B L||^2
    B_sq: float  # ||B||^2
    LBBL: float  # ||L*B*B L||


class NrcProblem:
    """All the pieces of one model instance.

    Parameters
    ----------
    A : LinearMap
        Forward operator ``X -> Y``.
    f : SmoothFidelity
        Data fidelity on ``Y``; must have a globally Lipschitz gradient (use
        :func:`~gmereg.fidelity.build_extension` for the clipped likelihood).
    reg : GmeRegularizer
        ``(psi, L, B, mu)``.
    Cmap : LinearMap
        Constraint operator ``X -> W``.
    Cset : BoxIndicator
        Constraint box in ``W``.
    beta : float, optional
        Lipschitz constant of ``grad d``; defaults to the certificate
        ``||A||^2 grad_lip(f) + mu ||L* B* B L||``. A smaller value is rejected.
    """

    def __init__(self, A: LinearMap, f: SmoothFidelity, reg: GmeRegularizer,
                 Cmap: LinearMap, Cset: BoxIndicator, beta: float | None = None):
        if A.out_dim != f.m:
            raise ValueError("A must map into the fidelity's space")
        if reg.L.in_dim != A.in_dim or Cmap.in_dim != A.in_dim:
            raise ValueError("A, L and Cmap must share their input space")
        if Cset.dim != Cmap.out_dim:
            raise ValueError("constraint box does not match Cmap's range")
        self.A, self.f, self.reg, self.Cmap, self.Cset = A, f, reg, Cmap, Cset
        cert = self.beta_certificate
        if beta is None:
            # a zero gradient is Lipschitz with any constant
            beta = cert if cert > 0 else 1.0
        elif beta < cert * (1 - 1e-12):
            raise ValueError(f"beta={beta} is below the Lipschitz certificate {cert}")
        if not beta > 0:
            raise ValueError("beta must be positive")
        self.beta = float(beta)
        self.x_feasible = self._feasible_point()

    @property
    def mu(self) -> float:
        return self.reg.mu

    @property
    def L(self) -> LinearMap:
        return self.reg.L

    @property
    def B(self) -> LinearMap:
        return self.reg.B

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.A.in_dim, self.L.out_dim, self.Cmap.out_dim

    @cached_property
    def grad_lip(self) -> float:
        return self.f.curvature_profile().grad_lip

    @cached_property
    def norms(self) -> ProblemNorms:
        L, B, C = self.L, self.B, self.Cmap
        BL = linops.compose(B, L)
        BBL = linops.compose(B.H, BL)
        return ProblemNorms(
            A_sq=linops.op_norm_sq_upper(self.A),
            LC=linops.normal_norm_upper(lambda x: L._adjoint(L._apply(x)) + C._adjoint(C._apply(x)),
                                        self.A.in_dim),
            BBL_sq=linops.op_norm_sq_upper(BBL),
            B_sq=linops.op_norm_sq_upper(B),
            LBBL=linops.op_norm_sq_upper(BL),
        )

    @property
    def beta_certificate(self) -> float:
        n = self.norms
        return n.A_sq * self.grad_lip + self.mu * n.LBBL

    def _feasible_point(self) -> np.ndarray:
        target = self.Cset.project(np.zeros(self.Cset.dim))
        if self.Cmap.kind == "identity":
            return target
        try:
            Cd = linops.to_dense(self.Cmap)
        except DiagnosticUnavailable:
            Cd = None
        if Cd is not None:
            x = np.linalg.lstsq(Cd, target, rcond=None)[0]
            if self.Cset.contains(Cd @ x, tol=1e-9):
                return x
        raise ValueError("could not exhibit a point with Cmap x in C")


@dataclass(frozen=True)
class StepParams:
    rho: float
    sigma: float
    tau: float
    theta: float

    @property
    def averagedness(self) -> float:
        """``T`` is ``2/(4 - theta)``-averaged in the metric ``P``."""
        return 2.0 / (4.0 - self.theta)


@dataclass
class SolverState:
    """A point ``h = (x, v, w, z)`` of the product space."""

    x: np.ndarray
    v: np.ndarray
    w: np.ndarray
    z: np.ndarray
    iteration: int = 0
    residual_sq: float = np.inf
    # cached L x, reused by the next application of T
    Lx: np.ndarray | None = field(default=None, repr=False, compare=False)

    @classmethod
    def zeros(cls, P: NrcProblem) -> "SolverState":
        nx, nz, nw = P.dims
        return cls(np.zeros(nx), np.zeros(nz), np.zeros(nz), np.zeros(nw))

    def blocks(self):
        return self.x, self.v, self.w, self.z

    def copy(self) -> "SolverState":
        return SolverState(*(b.copy() for b in self.blocks()), self.iteration, self.residual_sq)

    def __sub__(self, other: "SolverState") -> "SolverState":
        return SolverState(*(a - b for a, b in zip(self.blocks(), other.blocks())))

    def h_norm_sq(self) -> float:
        return float(sum(b @ b for b in self.blocks()))


def d_value(P: NrcProblem, x) -> float:
    """``f(A x) - (mu/2) ||B L x||^2``."""
    BLx = P.B.apply(P.L.apply(x))
    return float(P.f.value(P.A.apply(x))) - 0.5 * P.mu * float(BLx @ BLx)


def grad_d(P: NrcProblem, x) -> np.ndarray:
    """``A* grad f(A x) - mu L* B* B L x``."""
    x = np.asarray(x, dtype=float)
    A, L, B = P.A, P.L, P.B
    return A.adjoint_apply(P.f.grad(A.apply(x))) - P.mu * L.adjoint_apply(
        B.adjoint_apply(B.apply(L.apply(x))))


def objective(P: NrcProblem, x, tol: float = 1e-8) -> float:
    """``f(A x) + mu psi_B(L x)``, ``inf`` off the constraint set."""
    x = np.asarray(x, dtype=float)
    if not P.Cset.contains(P.Cmap.apply(x), tol=1e-8):
        return np.inf
    return float(P.f.value(P.A.apply(x))) + P.mu * gme_value(P.reg, P.L.apply(x), tol).value


def compute_rho(P: NrcProblem) -> float:
    """``1 / max(beta, mu ||B||^2)``."""
    return 1.0 / max(P.beta, P.mu * P.norms.B_sq)


def _theta(P: NrcProblem, rho: float, sigma: float, tau: float) -> float:
    mu, n = P.mu, P.norms
    num = sigma + tau - mu * n.LC
    den = rho * (sigma * tau - tau * mu * n.LC - mu**2 * n.BBL_sq)
    return num / den


def sigma_lower_bound(P: NrcProblem, rho: float, tau: float) -> float:
    """Right-hand side of the strict lower bound on ``sigma``."""
    mu, n = P.mu, P.norms
    return mu * n.LC + (2 * rho * mu**2 * n.BBL_sq + tau) / (2 * rho * tau - 1)


def choose_sigma_tau(P: NrcProblem, kappa: float = DEFAULT_KAPPA,
                     sigma_factor: float = SIGMA_FACTOR) -> StepParams:
    """``tau = kappa / (2 rho)`` and ``sigma = sigma_factor * (lower bound)``.

    Raises :class:`ParameterSelectionError` if the resulting ``theta`` is not
    in ``(0, 2)`` or the Schur-complement certificate for ``P > 0`` fails.
    """
    if not kappa > 1:
        raise ValueError("kappa must exceed 1 so that tau > 1/(2 rho)")
    if not sigma_factor > 1:
        raise ValueError("sigma_factor must exceed 1")
    rho = compute_rho(P)
    tau = kappa / (2 * rho)
    sigma = sigma_factor * sigma_lower_bound(P, rho, tau)
    theta = _theta(P, rho, sigma, tau)
    if not 0.0 < theta < 2.0:
        raise ParameterSelectionError(f"theta={theta} outside (0, 2)")
    # P > 0 iff its Schur complement on the x-block is; bounded below by
    # sigma - mu ||L*L + C*C|| - mu^2 ||B*B L||^2 / tau
    n = P.norms
    if not sigma - P.mu * n.LC - P.mu**2 * n.BBL_sq / tau > 0:
        raise ParameterSelectionError("metric P is not certified positive definite")
    return StepParams(rho=rho, sigma=sigma, tau=tau, theta=theta)


def p_norm_sq(P: NrcProblem, S: StepParams, h: SolverState) -> float:
    """``<h, P h>`` by block application."""
    x, v, w, z = h.blocks()
    mu = P.mu
    Lx = P.L._apply(x)
    BLx = P.B._apply(Lx)
    Bv = P.B._apply(v)
    Cx = P.Cmap._apply(x)
    return float(S.sigma * (x @ x) + S.tau * (v @ v) + mu * (w @ w) + mu * (z @ z)
                 - 2 * mu * (BLx @ Bv) - 2 * mu * (Lx @ w) - 2 * mu * (Cx @ z))


def p_matrix_dense(P: NrcProblem, S: StepParams, cap: int = DENSE_CAP) -> np.ndarray:
    """The block metric ``P`` as a dense symmetric matrix."""
    nx, nz, nw = P.dims
    if nx + 2 * nz + nw > cap:
        raise DiagnosticUnavailable("product space exceeds the dense cap")
    mu = P.mu
    Ld = linops.to_dense(P.L)
    Bd = linops.to_dense(P.B)
    Cd = linops.to_dense(P.Cmap)
    BBL = Bd.T @ Bd @ Ld
    Z = np.zeros
    return np.block([
        [S.sigma * np.eye(nx), -mu * BBL.T, -mu * Ld.T, -mu * Cd.T],
        [-mu * BBL, S.tau * np.eye(nz), Z((nz, nz)), Z((nz, nw))],
        [-mu * Ld, Z((nz, nz)), mu * np.eye(nz), Z((nz, nw))],
        [-mu * Cd, Z((nw, nz)), Z((nw, nz)), mu * np.eye(nw)],
    ])


def apply_T(P: NrcProblem, S: StepParams, h: SolverState) -> SolverState:
    """One application of the fixed-point operator ``T``.

    Returns the new state; its ``Lx`` cache holds ``L xi``.
    """
    A, L, B, C = P.A, P.L, P.B, P.Cmap
    mu = P.mu
    x, v, w, z = h.blocks()
    Lx = h.Lx if h.Lx is not None else L._apply(x)

    # xi = x - (1/sigma) [A* grad f(Ax) + mu L*(B*B(v - Lx) + w) + mu C* z]
    Cx = C._apply(x)
    g = A._adjoint(P.f.grad(A._apply(x)))
    g += mu * L._adjoint(B._adjoint(B._apply(v - Lx)) + w)
    g += mu * C._adjoint(z)
    xi = x - g / S.sigma

    Lxi = L._apply(xi)
    r = 2.0 * Lxi - Lx
    zeta = P.reg.psi._prox(mu / S.tau, v + (mu / S.tau) * B._adjoint(B._apply(r - v)))
    s = r + w
    eta = s - P.reg.psi._prox(1.0, s)
    c = 2.0 * C._apply(xi) - Cx + z
    varsigma = c - P.Cset.project(c)
    return SolverState(xi, zeta, eta, varsigma, h.iteration + 1, Lx=Lxi)


@dataclass
class SolveResult:
    """Output of :func:`km_solve`.

    ``trace`` columns are ``iteration``, ``residual_sq_H``, ``residual_sq_P``
    and ``objective`` (NaN where not evaluated).
    """

    x: np.ndarray
    state: SolverState
    params: StepParams
    converged: bool
    iterations: int
    trace: np.ndarray

    TRACE_COLUMNS = ("iteration", "residual_sq_H", "residual_sq_P", "objective")

    def write_trace_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(self.TRACE_COLUMNS)
            for row in self.trace:
                wr.writerow([int(row[0])] + [repr(float(v)) for v in row[1:]])


def km_solve(P: NrcProblem, S: StepParams | None = None, h0: SolverState | None = None,
             tol_sq: float = DEFAULT_TOL_SQ, max_iter: int = DEFAULT_MAX_ITER,
             log_p: bool = True, objective_every: int = 0,
             objective_tol: float = 1e-8) -> SolveResult:
    """Iterate ``h_{k+1} = T(h_k)`` until ``||h_k - h_{k-1}||^2 < tol_sq``.

    The stopping test uses the plain product-space norm. When ``log_p`` is
    set the residual in the metric ``P`` is recorded as well; with
    ``objective_every = n > 0`` the objective is evaluated every ``n``
    iterations (costly: each call solves an inner problem).
    """
    if tol_sq <= 0:
        raise ValueError("tol_sq must be positive")
    if S is None:
        S = choose_sigma_tau(P)
    h = SolverState.zeros(P) if h0 is None else h0.copy()
    if tuple(b.size for b in h.blocks()) != (P.dims[0], P.dims[1], P.dims[1], P.dims[2]):
        raise ValueError("initial state does not match the problem dimensions")

    rows = []
    converged = False
    k = 0
    for k in range(1, max_iter + 1):
        h_new = apply_T(P, S, h)
        dh = h_new - h
        res_h = dh.h_norm_sq()
        res_p = p_norm_sq(P, S, dh) if log_p else np.nan
        obj = np.nan
        if objective_every and k % objective_every == 0:
            obj = objective(P, h_new.x, objective_tol)
        h_new.residual_sq = res_h
        rows.append((k, res_h, res_p, obj))
        h = h_new
        if res_h < tol_sq:
            converged = True
            break
    if not converged:
        logger.warning("KM iteration stopped at max_iter=%d with residual %.3e", max_iter,
                       h.residual_sq)
    trace = np.array(rows, dtype=float).reshape(-1, 4)
    return SolveResult(h.x.copy(), h, S, converged, k, trace)


def is_coercive(f: SmoothFidelity) -> bool:
    """Whether ``f(u) -> inf`` as ``||u|| -> inf``."""
    if isinstance(f, QuadraticFidelity):
        return True
    if isinstance(f, ClippedGaussianNLL):
        return f.n_clipped == 0
    if isinstance(f, ExtendedFidelity):
        if isinstance(f.base, QuadraticFidelity):
            return True
        if not (np.all(np.isfinite(f.lower)) and np.all(np.isfinite(f.upper))):
            return is_coercive(f.base)
        # outside the box every row is a quadratic with curvature f''(endpoint)
        return bool(np.all(f.base.second(f.lower) > 0) and np.all(f.base.second(f.upper) > 0))
    return False


@dataclass
class ExistenceReport:
    """Which sufficient condition for a minimizer holds.

    Each ``condition_*`` is ``True``, ``False`` or ``None`` (not decidable
    automatically).
    """

    condition_i: bool | None
    condition_ii: bool | None
    condition_iii: bool | None
    notes: list[str] = field(default_factory=list)

    @property
    def certified(self) -> bool:
        return any(c is True for c in (self.condition_i, self.condition_ii, self.condition_iii))


def existence_diagnostics(P: NrcProblem) -> ExistenceReport:
    """Check the sufficient conditions for existence of a minimizer.

    (i)   coercive ``f`` and a polyhedral constraint set ``Cmap^{-1}(C)``;
    (ii)  bounded constraint set;
    (iii) coercive ``f`` and ``null A ∩ null L = {0}``.
    """
    notes = []
    coercive = is_coercive(P.f)
    box = P.Cset
    whole_space = not np.any(np.isfinite(box.lower)) and not np.any(np.isfinite(box.upper))

    # (ii): bounded box and injective Cmap
    cond_ii: bool | None
    if not box.bounded:
        cond_ii = False
    elif P.Cmap.kind == "identity":
        cond_ii = True
    else:
        try:
            Cd = linops.to_dense(P.Cmap)
            s = np.linalg.svd(Cd, compute_uv=False)
            cond_ii = bool(Cd.shape[0] >= Cd.shape[1] and s[-1] > 1e-10 * s[0])
        except DiagnosticUnavailable:
            cond_ii = None
            notes.append("(ii) undecided: Cmap too large to test injectivity")

    # (i): the preimage of a box under a linear map is polyhedral
    cond_i: bool | None = coercive
    if whole_space:
        notes.append("(i) constraint set is the whole space")
    elif P.Cmap.kind == "identity":
        notes.append("(i) constraint set is a box")
    else:
        notes.append("(i) constraint set is the preimage of a box (polyhedral)")

    cond_iii: bool | None = False
    if coercive:
        try:
            cond_iii = linops.null_intersection_trivial(P.A, P.L)
        except DiagnosticUnavailable:
            cond_iii = None
            notes.append("(iii) undecided: operators too large for the rank test")
    if not coercive:
        notes.append("f is not coercive")

    report = ExistenceReport(cond_i, cond_ii, cond_iii, notes)
    if not report.certified:
        warnings.warn("no sufficient condition for the existence of a minimizer is certified",
                      RuntimeWarning, stacklevel=2)
    return report
