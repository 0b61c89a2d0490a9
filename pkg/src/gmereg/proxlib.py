"""Prox-friendly seed functions, box projections and the GME inner problem."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .linops import LinearMap, op_norm_sq_upper

__all__ = [
    "ProxFunction",
    "L1Norm",
    "BoxIndicator",
    "soft_threshold",
    "InnerMinResult",
    "moreau_inner_min",
]

BOX_MEMBERSHIP_TOL = 1e-12


def soft_threshold(x, gamma):
    """``sign(x) * max(|x| - gamma, 0)``, elementwise; ``gamma`` may broadcast."""
    return np.sign(x) * np.maximum(np.abs(x) - gamma, 0.0)


class ProxFunction:
    """A proper lsc convex function on ``R^dim`` with a cheap proximity operator."""

    kind = "abstract"

    def __init__(self, dim: int):
        if int(dim) < 1:
            raise ValueError("dim must be positive")
        self.dim = int(dim)

    def prox(self, gamma: float, x):
        """``argmin_v F(v) + ||v - x||^2 / (2 gamma)``."""
        if not np.all(np.asarray(gamma) > 0):
            raise ValueError(f"prox step must be positive, got {gamma}")
        x = np.asarray(x, dtype=float)
        if x.shape[0] != self.dim:
            raise ValueError(f"expected leading dimension {self.dim}, got {x.shape}")
        return self._prox(gamma, x)

    def value(self, x) -> float:
        x = np.asarray(x, dtype=float)
        if x.shape[0] != self.dim:
            raise ValueError(f"expected leading dimension {self.dim}, got {x.shape}")
        return self._value(x)

    __call__ = value


class L1Norm(ProxFunction):
    kind = "l1_norm"

    def _prox(self, gamma, x):
        return soft_threshold(x, gamma)

    def _value(self, x):
        return float(np.abs(x).sum())


class BoxIndicator(ProxFunction):
    """Indicator of ``{x : lower <= x <= upper}``; its prox is the clamp."""

    kind = "indicator_box"

    def __init__(self, lower, upper, dim: int | None = None):
        lower = np.atleast_1d(np.asarray(lower, dtype=float))
        upper = np.atleast_1d(np.asarray(upper, dtype=float))
        if dim is None:
            dim = max(lower.size, upper.size)
        lower = np.broadcast_to(lower, (dim,)).copy()
        upper = np.broadcast_to(upper, (dim,)).copy()
        if np.any(lower > upper):
            raise ValueError("box needs lower <= upper in every coordinate")
        super().__init__(dim)
        lower.setflags(write=False)
        upper.setflags(write=False)
        self.lower = lower
        self.upper = upper

    @property
    def bounded(self) -> bool:
        return bool(np.all(np.isfinite(self.lower)) and np.all(np.isfinite(self.upper)))

    def project(self, x):
        x = np.asarray(x, dtype=float)
        lo, hi = self.lower, self.upper
        if x.ndim > 1:
            lo = lo.reshape(lo.shape + (1,) * (x.ndim - 1))
            hi = hi.reshape(hi.shape + (1,) * (x.ndim - 1))
        return np.clip(x, lo, hi)

    def _prox(self, gamma, x):
        return self.project(x)

    def contains(self, x, tol: float = BOX_MEMBERSHIP_TOL) -> bool:
        x = np.asarray(x, dtype=float)
        return bool(np.all(x >= self.lower - tol) and np.all(x <= self.upper + tol))

    def _value(self, x):
        return 0.0 if self.contains(x) else np.inf


@dataclass
class InnerMinResult:
    v: np.ndarray
    value: float
    converged: bool
    iterations: int


def moreau_inner_min(F: ProxFunction, Bmap: LinearMap, x, tol: float = 1e-10,
                     max_iter: int = 100_000) -> InnerMinResult:
    """Minimize ``F(v) + ||B(x - v)||^2 / 2`` over ``v``.

    Plain proximal gradient from ``v = 0`` with step ``1/||B||^2``; stops once
    the proximal-gradient step ``||v_{k+1} - v_k||`` drops below ``tol``. When
    ``max_iter`` runs out the last iterate is returned with
    ``converged=False``.
    """
    if F.kind != "l1_norm":
        raise ValueError("the inner problem is only implemented for the l1 seed")
    if tol <= 0:
        raise ValueError("tol must be positive")
    x = np.asarray(x, dtype=float)
    if Bmap.in_dim != F.dim or x.shape != (F.dim,):
        raise ValueError("dimension mismatch between F, B and x")

    def objective(v):
        r = Bmap.apply(x - v)
        return F.value(v) + 0.5 * float(r @ r)

    lip = op_norm_sq_upper(Bmap)
    v = np.zeros_like(x)
    if lip == 0.0:
        # B = 0: the quadratic vanishes and min F = F(0) = 0 for the l1 seed
        return InnerMinResult(v, objective(v), True, 0)
    step = 1.0 / lip
    for k in range(1, max_iter + 1):
        grad = Bmap.adjoint_apply(Bmap.apply(v - x))
        v_new = F.prox(step, v - step * grad)
        res = np.linalg.norm(v_new - v)
        v = v_new
        if res < tol:
            return InnerMinResult(v, objective(v), True, k)
    return InnerMinResult(v, objective(v), False, max_iter)
