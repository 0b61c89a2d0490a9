"""Convex models with generalized-Moreau-enhanced (GME) sparsity regularizers.

Solves ``minimize_{Cmap x in C} f(A x) + mu * psi_B(L x)`` for smooth convex
(possibly non-quadratic) fidelities ``f`` by a proximal splitting fixed-point
iteration, and includes a declipping/denoising experiment harness.
"""
from . import declip, fidelity, gme, linops, proxlib, solver
from .fidelity import (
    ClippedGaussianNLL,
    CurvatureProfile,
    ExtendedFidelity,
    QuadraticFidelity,
    build_extension,
)
from .gme import GmeRegularizer, design_B_invertible, gme_value, overall_convexity_check
from .linops import LinearMap, op_norm_sq_upper
from .proxlib import BoxIndicator, L1Norm, moreau_inner_min
from .solver import (
    NrcProblem,
    SolverState,
    StepParams,
    apply_T,
    choose_sigma_tau,
    existence_diagnostics,
    km_solve,
)

__version__ = "0.1.0"
