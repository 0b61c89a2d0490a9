"""Generalized Moreau enhancement of the l1 seed and its convexity certificate."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import linops
from .linops import DENSE_CAP, LinearMap
from .proxlib import L1Norm, ProxFunction, moreau_inner_min

__all__ = [
    "GmeRegularizer",
    "GmeValue",
    "ConvexityCertificate",
    "design_B_invertible",
    "user_supplied_B",
    "overall_convexity_check",
    "gme_value",
]


@dataclass(frozen=True)
class GmeRegularizer:
    """``mu * psi_B(L x)`` with ``psi_B(z) = psi(z) - min_v [psi(v) + ||B(z - v)||^2 / 2]``."""

    psi: ProxFunction
    L: LinearMap
    B: LinearMap
    mu: float

    def __post_init__(self):
        if self.psi.kind != "l1_norm":
            raise ValueError("only the (coercive) l1 seed is supported")
        if self.L.out_dim != self.psi.dim or self.B.in_dim != self.psi.dim:
            raise ValueError("dimensions of psi, L and B do not chain")
        if not self.mu > 0:
            raise ValueError("mu must be positive")


def design_B_invertible(L_inv: LinearMap, lambda_diag, mu: float, c: float = 0.99,
                        A: LinearMap | None = None) -> LinearMap:
    """GME matrix for an invertible ``L``: ``B = sqrt(c/mu) diag(sqrt(lambda)) A L^{-1}``.

    Then ``mu L* B* B L = c A* Lambda A``, so
    ``A* Lambda A - mu L* B* B L = (1 - c) A* Lambda A`` is positive
    semidefinite. ``A`` defaults to the identity on ``L_inv``'s range.
    """
    if not 0.0 < c < 1.0:
        raise ValueError(f"margin c must lie in (0, 1), got {c}")
    if not mu > 0:
        raise ValueError("mu must be positive")
    lam = np.asarray(lambda_diag, dtype=float).ravel()
    if np.any(lam < 0):
        raise ValueError("curvature floor must be nonnegative")
    root = linops.diagonal(np.sqrt(c / mu) * np.sqrt(lam))
    if A is None:
        return linops.compose(root, L_inv)
    return linops.compose(root, A, L_inv)


def user_supplied_B(B: LinearMap, A: LinearMap, lambda_diag, reg_L: LinearMap, mu: float,
                    psi: ProxFunction | None = None, tol: float = 1e-10) -> GmeRegularizer:
    """Accept an externally designed ``B`` only if it passes the convexity certificate.

    This is the entry point for designs not covered by
    :func:`design_B_invertible` (e.g. LDU-based constructions for a
    non-invertible ``L``).
    """
    reg = GmeRegularizer(psi or L1Norm(reg_L.out_dim), reg_L, B, mu)
    cert = overall_convexity_check(A, lambda_diag, reg, tol)
    if not cert.passed:
        raise ValueError(f"B violates the overall convexity condition (min eig {cert.min_eig:.3e})")
    return reg


@dataclass(frozen=True)
class ConvexityCertificate:
    passed: bool
    min_eig: float

    def __iter__(self):
        return iter((self.passed, self.min_eig))


def overall_convexity_check(A: LinearMap, lambda_diag, reg: GmeRegularizer, tol: float = 1e-10,
                            cap: int = DENSE_CAP) -> ConvexityCertificate:
    """Smallest eigenvalue of ``A* Lambda A - mu L* B* B L`` and whether it is ``>= -tol``.

    Passing certifies convexity of ``f∘A - (mu/2)||B L .||^2`` for any ``f``
    whose Hessian dominates ``diag(lambda_diag)`` everywhere.
    """
    lam = np.asarray(lambda_diag, dtype=float).ravel()
    if lam.size != A.out_dim or A.in_dim != reg.L.in_dim:
        raise ValueError("dimension mismatch between A, Lambda and L")
    Ad = linops.to_dense(A, cap)
    BLd = linops.to_dense(linops.compose(reg.B, reg.L), cap)
    M = Ad.T @ (lam[:, None] * Ad) - reg.mu * (BLd.T @ BLd)
    min_eig = float(np.linalg.eigvalsh(0.5 * (M + M.T))[0])
    return ConvexityCertificate(min_eig >= -tol, min_eig)


@dataclass(frozen=True)
class GmeValue:
    value: float
    converged: bool

    def __float__(self):
        return float(self.value)


def gme_value(reg: GmeRegularizer, z, tol: float = 1e-10, max_iter: int = 100_000) -> GmeValue:
    """``psi_B(z)``, with the inner minimum solved to accuracy ``tol``.

    The result is flagged ``converged=False`` (an approximation) when the
    inner solver ran out of iterations.
    """
    z = np.asarray(z, dtype=float)
    inner = moreau_inner_min(reg.psi, reg.B, z, tol=tol, max_iter=max_iter)
    return GmeValue(reg.psi.value(z) - inner.value, inner.converged)
