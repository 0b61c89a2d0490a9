"""Separable smooth convex data-fidelity terms.

Each fidelity is a sum ``f(u) = sum_i f_i(u_i)`` and exposes per-row value,
first and second derivatives. Three kinds are provided:

* :class:`QuadraticFidelity` -- ``0.5 * ||y - u||^2``;
* :class:`ClippedGaussianNLL` -- the negative log-likelihood of an
  observation saturated at ``±theta`` after additive ``N(0, s^2)`` noise;
* :class:`ExtendedFidelity` -- any of the above replaced, outside a box, by
  its second-order Taylor expansion at the nearest box point, which makes
  the gradient globally Lipschitz.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import erfc, erfcx

__all__ = [
    "CurvatureProfile",
    "SmoothFidelity",
    "QuadraticFidelity",
    "ClippedGaussianNLL",
    "ExtendedFidelity",
    "build_extension",
    "log_gauss_tail",
    "gauss_hazard",
]

_SQRT2 = np.sqrt(2.0)
_LOG_SQRT_2PI = 0.5 * np.log(2.0 * np.pi)
_SQRT_2_OVER_PI = np.sqrt(2.0 / np.pi)
#: spacing of the grid scan used for curvature extrema over a box
CURVATURE_GRID = 1e-3
#: tolerance for recognizing saturated samples in externally loaded data
EXTERNAL_CLIP_TOL = 1e-12


def log_gauss_tail(z):
    """``log Q(z)`` where ``Q(z) = P(N(0,1) > z)``, accurate in both tails."""
    z = np.asarray(z, dtype=float)
    t = z / _SQRT2
    out = np.empty_like(t)
    pos = t >= 0
    # erfc(t) = erfcx(t) exp(-t^2) keeps the right tail in log space
    out[pos] = np.log(0.5 * erfcx(t[pos])) - t[pos] ** 2
    out[~pos] = np.log(0.5 * erfc(t[~pos]))
    return out


def gauss_hazard(z):
    """Standard normal hazard ``phi(z) / Q(z)`` (inverse Mills ratio)."""
    z = np.asarray(z, dtype=float)
    with np.errstate(over="ignore"):
        # erfcx overflows to inf for z << 0, where the hazard is 0 anyway
        return _SQRT_2_OVER_PI / erfcx(z / _SQRT2)


@dataclass(frozen=True)
class CurvatureProfile:
    """Diagonal curvature floor ``lambda_diag`` and a gradient-Lipschitz bound."""

    lambda_diag: np.ndarray
    grad_lip: float

    def __post_init__(self):
        lam = np.asarray(self.lambda_diag, dtype=float)
        if np.any(lam < 0) or np.any(lam > self.grad_lip * (1 + 1e-12)):
            raise ValueError("curvature floor must lie in [0, grad_lip]")


def _lead(a, u):
    # broadcast a per-row vector over trailing batch axes of u
    return a.reshape(a.shape + (1,) * (np.ndim(u) - 1))


class SmoothFidelity:
    """Base class for separable fidelities on ``R^m``.

    Subclasses provide ``row_terms(u)`` returning the elementwise
    ``(f_i(u_i), f_i'(u_i), f_i''(u_i))``.
    """

    kind = "abstract"

    def __init__(self, m: int):
        self.m = int(m)

    def _check(self, u):
        u = np.asarray(u, dtype=float)
        if u.shape[:1] != (self.m,):
            raise ValueError(f"expected leading dimension {self.m}, got {u.shape}")
        return u

    def row_terms(self, u):  # pragma: no cover - abstract
        raise NotImplementedError

    def value(self, u) -> float:
        u = self._check(u)
        return self.row_terms(u)[0].sum(axis=0)

    def grad(self, u):
        u = self._check(u)
        return self.row_terms(u)[1]

    def second(self, u):
        """Diagonal of the Hessian."""
        u = self._check(u)
        return self.row_terms(u)[2]

    __call__ = value

    def curvature_profile(self, domain=None) -> CurvatureProfile:  # pragma: no cover
        raise NotImplementedError


class QuadraticFidelity(SmoothFidelity):
    """``f(u) = 0.5 * ||y - u||^2``."""

    kind = "quadratic"

    def __init__(self, y):
        y = np.array(y, dtype=float).ravel()
        super().__init__(y.size)
        y.setflags(write=False)
        self.y = y

    def row_terms(self, u):
        r = u - _lead(self.y, u)
        return 0.5 * r**2, r, np.ones_like(r)

    def curvature_profile(self, domain=None) -> CurvatureProfile:
        return CurvatureProfile(np.ones(self.m), 1.0)


class ClippedGaussianNLL(SmoothFidelity):
    """Negative log-likelihood of ``y = clip_theta(u + eps)``, ``eps ~ N(0, s^2 I)``.

    Rows with ``|y_i| < theta`` are quadratic ``0.5 ((y_i - u_i)/s)^2``. A row
    saturated at ``+theta`` contributes ``-log int_{theta-u}^inf exp(-t^2/2s^2) dt``
    and one at ``-theta`` the mirror image; both are evaluated through the
    Gaussian tail in log space.

    Parameters
    ----------
    y : array_like
        Observation, entries in ``[-theta, theta]``.
    s : float
        Noise standard deviation.
    theta : float
        Clip level.
    clip_tol : float
        Samples with ``|y_i| >= theta - clip_tol`` are treated as saturated.
        Zero (exact equality) suits synthetic data produced by :func:`clip`;
        use :data:`EXTERNAL_CLIP_TOL` for data read from disk.
    """

    kind = "clipped_gaussian_nll"

    def __init__(self, y, s: float, theta: float, clip_tol: float = 0.0):
        y = np.array(y, dtype=float).ravel()
        if s <= 0 or theta <= 0:
            raise ValueError("noise std and clip level must be positive")
        if np.any(np.abs(y) > theta + clip_tol):
            raise ValueError("observation has entries outside [-theta, theta]")
        super().__init__(y.size)
        self.s = float(s)
        self.theta = float(theta)
        sign = np.zeros(y.size)
        sign[y >= theta - clip_tol] = 1.0
        sign[y <= -theta + clip_tol] = -1.0
        y.setflags(write=False)
        sign.setflags(write=False)
        self.y = y
        #: +1 for rows saturated at +theta, -1 at -theta, 0 otherwise
        self.clip_sign = sign
        self._interior = sign == 0

    @property
    def n_clipped(self) -> int:
        return int(np.count_nonzero(self.clip_sign))

    def tail_terms(self, u, sign):
        """Value and derivatives of a saturated row, ``sign = ±1``."""
        s = self.s
        z = (self.theta - sign * u) / s
        h = gauss_hazard(z)
        val = -np.log(s) - _LOG_SQRT_2PI - log_gauss_tail(z)
        d1 = -sign * h / s
        d2 = h * (h - z) / s**2
        return val, d1, d2

    def row_terms(self, u):
        inner = _lead(self._interior, u)
        sign = _lead(self.clip_sign, u)
        s2 = self.s**2
        r = u - _lead(self.y, u)
        val = 0.5 * r**2 / s2
        d1 = r / s2
        d2 = np.full_like(r, 1.0 / s2)
        if self.n_clipped:
            mask = np.broadcast_to(~inner, u.shape)
            sg = np.broadcast_to(sign, u.shape)[mask]
            tv, t1, t2 = self.tail_terms(u[mask], sg)
            val[mask], d1[mask], d2[mask] = tv, t1, t2
        return val, d1, d2

    def curvature_profile(self, domain=None) -> CurvatureProfile:
        """Curvature floor and gradient-Lipschitz bound.

        With ``domain=None`` the extrema are over the whole real line, where a
        saturated row has ``inf f'' = 0`` and ``sup f'' = 1/s^2``. With a box
        ``(lower, upper)`` they are taken over each ``[lower_i, upper_i]`` by a
        grid scan of spacing ``CURVATURE_GRID`` that includes both endpoints.
        """
        inv_s2 = 1.0 / self.s**2
        lam = np.where(self._interior, inv_s2, 0.0)
        if domain is None or not self.n_clipped:
            return CurvatureProfile(lam, inv_s2)
        lower, upper = (np.broadcast_to(np.asarray(b, dtype=float), (self.m,)) for b in domain)
        lip = inv_s2 if np.any(self._interior) else 0.0
        cache: dict = {}
        for i in np.flatnonzero(~self._interior):
            key = (self.clip_sign[i], lower[i], upper[i])
            if key not in cache:
                lo, hi = _box_extrema(lambda r: self.tail_terms(r, key[0])[2], lower[i], upper[i])
                cache[key] = (lo, hi)
            lam[i] = cache[key][0]
            lip = max(lip, cache[key][1])
        return CurvatureProfile(lam, lip)


def _box_extrema(fn, lo: float, hi: float) -> tuple[float, float]:
    if not (np.isfinite(lo) and np.isfinite(hi)):
        raise ValueError("curvature scan needs a bounded box")
    n = int(np.ceil((hi - lo) / CURVATURE_GRID)) + 1
    grid = np.linspace(lo, hi, max(n, 2))
    vals = fn(grid)
    return float(vals.min()), float(vals.max())


class ExtendedFidelity(SmoothFidelity):
    """``base`` on the box ``[lower, upper]``, its Taylor quadratic outside.

    For ``r`` outside ``[l_i, u_i]`` with ``c = clamp(r)``::

        f~_i(r) = f_i(c) + f_i'(c) (r - c) + f_i''(c) (r - c)^2 / 2

    so value and slope are continuous across the boundary and the second
    derivative is frozen at its boundary value.
    """

    kind = "extended"

    def __init__(self, base: SmoothFidelity, lower, upper):
        super().__init__(base.m)
        lower = np.broadcast_to(np.asarray(lower, dtype=float), (self.m,)).copy()
        upper = np.broadcast_to(np.asarray(upper, dtype=float), (self.m,)).copy()
        if np.any(lower > upper) or np.any(np.isnan(lower)) or np.any(np.isnan(upper)):
            raise ValueError("extension box is empty")
        if isinstance(base, ExtendedFidelity):
            raise ValueError("base fidelity is already extended")
        self.base = base
        self.lower = lower
        self.upper = upper

    def row_terms(self, u):
        c = np.clip(u, _lead(self.lower, u), _lead(self.upper, u))
        d = u - c
        f0, f1, f2 = self.base.row_terms(c)
        return f0 + f1 * d + 0.5 * f2 * d**2, f1 + f2 * d, f2

    def curvature_profile(self, domain=None) -> CurvatureProfile:
        # outside the box f~'' is the boundary value, so the extrema over R
        # are the extrema of the base over the box
        if isinstance(self.base, QuadraticFidelity):
            return self.base.curvature_profile()
        return self.base.curvature_profile((self.lower, self.upper))


def build_extension(F: SmoothFidelity, lower, upper) -> ExtendedFidelity:
    """Extend ``F`` outside the box ``[lower, upper]`` by Taylor quadratics."""
    return ExtendedFidelity(F, lower, upper)
