"""Finite-dimensional linear maps with exact adjoints.

Every map acts on 1-D vectors; maps also accept 2-D arrays whose columns are
treated as independent vectors, which the experiment harness uses to push
several right-hand sides through the same operator at once.
"""
from __future__ import annotations

import numpy as np

__all__ = [
    "DiagnosticUnavailable",
    "LinearMap",
    "DenseMap",
    "IdentityMap",
    "DiagonalMap",
    "DCTMap",
    "InverseDCTMap",
    "ComposedMap",
    "ScaledMap",
    "AdjointMap",
    "dense",
    "identity",
    "diagonal",
    "dct",
    "inverse_dct",
    "compose",
    "scaled",
    "zero",
    "dct_matrix",
    "to_dense",
    "op_norm_sq_upper",
    "normal_norm_upper",
    "null_intersection_trivial",
    "DENSE_CAP",
]

#: Largest column count materialized by the SVD/eigen diagnostics.
DENSE_CAP = 4096

POWER_ITERS = 200
POWER_TOL = 1e-10
POWER_SAFETY = 1e-6


class DiagnosticUnavailable(RuntimeError):
    """Raised when a dense diagnostic would exceed the materialization cap."""


class LinearMap:
    """Base class: a linear map ``R^in_dim -> R^out_dim``.

    Subclasses implement ``_apply`` and ``_adjoint``; the public methods
    validate the leading dimension.
    """

    kind = "abstract"

    def __init__(self, in_dim: int, out_dim: int):
        in_dim, out_dim = int(in_dim), int(out_dim)
        if in_dim < 1 or out_dim < 1:
            raise ValueError(f"dimensions must be positive, got {in_dim}->{out_dim}")
        self.in_dim = in_dim
        self.out_dim = out_dim

    @property
    def shape(self) -> tuple[int, int]:
        return (self.out_dim, self.in_dim)

    def apply(self, x):
        x = np.asarray(x, dtype=float)
        if x.ndim == 0 or x.shape[0] != self.in_dim:
            raise ValueError(
                f"{self.kind} map expects leading dimension {self.in_dim}, got shape {x.shape}"
            )
        return self._apply(x)

    def adjoint_apply(self, y):
        y = np.asarray(y, dtype=float)
        if y.ndim == 0 or y.shape[0] != self.out_dim:
            raise ValueError(
                f"{self.kind} adjoint expects leading dimension {self.out_dim}, got shape {y.shape}"
            )
        return self._adjoint(y)

    __call__ = apply

    @property
    def H(self) -> "LinearMap":
        """The adjoint as a map in its own right."""
        return AdjointMap(self)

    def __matmul__(self, other: "LinearMap") -> "LinearMap":
        return compose(self, other)

    def __rmul__(self, c: float) -> "LinearMap":
        return scaled(c, self)

    def _apply(self, x):  # pragma: no cover - abstract
        raise NotImplementedError

    def _adjoint(self, y):  # pragma: no cover - abstract
        raise NotImplementedError

    def __repr__(self):
        return f"<{type(self).__name__} {self.out_dim}x{self.in_dim}>"


def _bcast(d: np.ndarray, x: np.ndarray) -> np.ndarray:
    # reshape a length-n coefficient vector to broadcast over column batches
    return d.reshape(d.shape + (1,) * (x.ndim - 1))


class DenseMap(LinearMap):
    kind = "dense"

    def __init__(self, matrix):
        M = np.array(matrix, dtype=float, ndmin=2)
        if M.ndim != 2:
            raise ValueError("dense map needs a 2-D array")
        super().__init__(M.shape[1], M.shape[0])
        M.setflags(write=False)
        self.matrix = M

    def _apply(self, x):
        return self.matrix @ x

    def _adjoint(self, y):
        return self.matrix.T @ y


class IdentityMap(LinearMap):
    kind = "identity"

    def __init__(self, dim: int):
        super().__init__(dim, dim)

    def _apply(self, x):
        return x.copy()

    _adjoint = _apply


class DiagonalMap(LinearMap):
    kind = "diagonal"

    def __init__(self, d):
        d = np.array(d, dtype=float).ravel()
        super().__init__(d.size, d.size)
        d.setflags(write=False)
        self.d = d

    def _apply(self, x):
        return _bcast(self.d, x) * x

    _adjoint = _apply


def dct_matrix(m: int) -> np.ndarray:
    """Orthonormal DCT-II matrix ``D`` with ``D @ x == dct(x, norm='ortho')``."""
    n = np.arange(m)
    D = np.cos(np.pi * (n[None, :] + 0.5) * n[:, None] / m)
    D *= np.sqrt(2.0 / m)
    D[0] /= np.sqrt(2.0)
    return D


_DCT_CACHE: dict[int, np.ndarray] = {}


def _cached_dct_matrix(m: int) -> np.ndarray:
    D = _DCT_CACHE.get(m)
    if D is None:
        D = dct_matrix(m)
        D.setflags(write=False)
        _DCT_CACHE[m] = D
    return D


class DCTMap(LinearMap):
    """Orthonormal type-II DCT; an isometry, so its adjoint is its inverse."""

    kind = "dct"

    def __init__(self, m: int):
        super().__init__(m, m)
        self.matrix = _cached_dct_matrix(m)

    def _apply(self, x):
        return self.matrix @ x

    def _adjoint(self, y):
        return self.matrix.T @ y


class InverseDCTMap(DCTMap):
    kind = "inverse_dct"

    _apply, _adjoint = DCTMap._adjoint, DCTMap._apply


class ComposedMap(LinearMap):
    """``outer ∘ inner``."""

    kind = "composition"

    def __init__(self, outer: LinearMap, inner: LinearMap):
        if outer.in_dim != inner.out_dim:
            raise ValueError(
                f"cannot compose {outer!r} after {inner!r}: {inner.out_dim} != {outer.in_dim}"
            )
        super().__init__(inner.in_dim, outer.out_dim)
        self.outer = outer
        self.inner = inner

    def _apply(self, x):
        return self.outer._apply(self.inner._apply(x))

    def _adjoint(self, y):
        return self.inner._adjoint(self.outer._adjoint(y))


class ScaledMap(LinearMap):
    kind = "scaled"

    def __init__(self, c: float, base: LinearMap):
        super().__init__(base.in_dim, base.out_dim)
        self.c = float(c)
        self.base = base

    def _apply(self, x):
        return self.c * self.base._apply(x)

    def _adjoint(self, y):
        return self.c * self.base._adjoint(y)


class AdjointMap(LinearMap):
    kind = "adjoint"

    def __init__(self, base: LinearMap):
        super().__init__(base.out_dim, base.in_dim)
        self.base = base

    def _apply(self, x):
        return self.base._adjoint(x)

    def _adjoint(self, y):
        return self.base._apply(y)

    @property
    def H(self):
        return self.base


def dense(matrix) -> DenseMap:
    return DenseMap(matrix)


def identity(dim: int) -> IdentityMap:
    return IdentityMap(dim)


def diagonal(d) -> DiagonalMap:
    return DiagonalMap(d)


def dct(m: int) -> DCTMap:
    return DCTMap(m)


def inverse_dct(m: int) -> InverseDCTMap:
    return InverseDCTMap(m)


def compose(*maps: LinearMap) -> LinearMap:
    """``compose(L3, L2, L1)`` is ``L3 ∘ L2 ∘ L1`` (rightmost applied first)."""
    if not maps:
        raise ValueError("compose needs at least one map")
    out = maps[-1]
    for outer in reversed(maps[:-1]):
        out = ComposedMap(outer, out)
    return out


def scaled(c: float, base: LinearMap) -> ScaledMap:
    return ScaledMap(c, base)


def zero(in_dim: int, out_dim: int | None = None) -> LinearMap:
    """The zero map; square unless ``out_dim`` is given."""
    if out_dim is None or out_dim == in_dim:
        return DiagonalMap(np.zeros(in_dim))
    return DenseMap(np.zeros((out_dim, in_dim)))


def to_dense(L: LinearMap, cap: int = DENSE_CAP) -> np.ndarray:
    """Materialize ``L`` as an ``out_dim x in_dim`` array."""
    if L.in_dim > cap:
        raise DiagnosticUnavailable(
            f"refusing to materialize {L!r}: {L.in_dim} columns exceeds cap {cap}"
        )
    return np.asarray(L.apply(np.eye(L.in_dim)), dtype=float).reshape(L.out_dim, L.in_dim)


def normal_norm_upper(normal, dim: int, iters: int = POWER_ITERS, tol: float = POWER_TOL,
                      seed: int = 0) -> float:
    """Upper estimate of the largest eigenvalue of a PSD map given as a callable.

    ``normal`` must be self-adjoint and positive semidefinite (``L*L`` or a
    sum of such terms). Power iteration runs for ``iters`` steps or until the
    Rayleigh quotient changes by less than ``tol`` relatively; the result is
    inflated by ``1 + 10*tol`` and floored by the ``1 + 1e-6`` safety margin so
    that downstream step-size bounds stay on the safe side.
    """
    if iters < 1 or tol <= 0:
        raise ValueError("need iters >= 1 and tol > 0")
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(dim)
    x /= np.linalg.norm(x)
    lam = 0.0
    for _ in range(iters):
        y = normal(x)
        lam_new = float(x @ y)
        ny = np.linalg.norm(y)
        if ny == 0.0:
            return 0.0
        x = y / ny
        if lam_new > 0 and abs(lam_new - lam) <= tol * lam_new:
            lam = lam_new
            break
        lam = lam_new
    # the normalized image gives a Rayleigh quotient at least as large
    lam = max(lam, float(x @ normal(x)))
    return lam * max(1.0 + 10.0 * tol, 1.0 + POWER_SAFETY)


def op_norm_sq_upper(L: LinearMap, iters: int = POWER_ITERS, tol: float = POWER_TOL,
                     seed: int = 0) -> float:
    """Upper estimate of ``||L||_op^2`` by power iteration on ``L*L``."""
    return normal_norm_upper(lambda x: L._adjoint(L._apply(x)), L.in_dim, iters, tol, seed)


def null_intersection_trivial(A: LinearMap, L: LinearMap, tol: float = 1e-10,
                              cap: int = DENSE_CAP) -> bool:
    """Whether ``null A ∩ null L = {0}``, i.e. ``[A; L]`` has full column rank."""
    if A.in_dim != L.in_dim:
        raise ValueError("A and L must share their input space")
    M = np.vstack([to_dense(A, cap), to_dense(L, cap)])
    s = np.linalg.svd(M, compute_uv=False)
    if s[0] == 0.0:
        return False
    return bool(s[-1] > tol * s[0]) and M.shape[0] >= M.shape[1]
