"""
The enhanced l1 penalty on a single number
==========================================

With ``B = 1`` the generalized Moreau enhancement of ``|x|`` is ``|x|``
minus its Huber envelope: it grows like ``|x|`` near zero and then goes
flat. Large values are therefore no longer shrunk. This script evaluates
the penalty by its inner minimization and then solves two scalar denoising
problems to show the bias difference.
"""
import numpy as np

from gmereg import linops
from gmereg.fidelity import QuadraticFidelity
from gmereg.gme import GmeRegularizer, gme_value
from gmereg.proxlib import BoxIndicator, L1Norm
from gmereg.solver import NrcProblem, km_solve

I = linops.identity(1)

# penalty values for a few inputs: l1 against its enhanced version
reg = GmeRegularizer(L1Norm(1), I, linops.identity(1), mu=1.0)
print("   x     |x|   psi_B(x)")
for x in (0.0, 0.5, 1.0, 2.0, 4.0):
    print(f"{x:5.1f} {abs(x):6.2f} {gme_value(reg, [x]).value:9.4f}")

# denoise y = 3 with weight 1, once with plain l1 (B = 0) and once with
# the largest B that keeps the problem convex (mu B^2 = 0.99)
for label, B in (("l1 ", linops.zero(1)), ("gme", linops.diagonal([np.sqrt(0.99)]))):
    P = NrcProblem(I, QuadraticFidelity([3.0]), GmeRegularizer(L1Norm(1), I, B, 1.0), I,
                   BoxIndicator(-10, 10, 1))
    res = km_solve(P, tol_sq=1e-12)
    print(f"{label}: estimate {res.x[0]:.4f} after {res.iterations} iterations")

# l1 returns 3 - 1 = 2; the enhanced penalty is flat beyond 1/0.99 and
# returns the observation itself

# optional figure of the two penalties
try:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
except ImportError:
    plt = None
if plt is not None:
    t = np.linspace(-3, 3, 301)
    plt.plot(t, np.abs(t), label="|x|")
    plt.plot(t, [gme_value(reg, [v]).value for v in t], label="enhanced")
    plt.legend()
    plt.savefig("scalar_penalty.svg")
    print("wrote scalar_penalty.svg")
