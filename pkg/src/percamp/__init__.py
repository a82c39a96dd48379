"""Approximate pure-state barycenters of the negative spherical perceptron.

Stages: replica-symmetric variational solve, Parisi PDE via backward
Cole-Hopf recursion, state-evolution diagnostics, two-stage message passing
(replica-symmetric then incremental), and convex rounding onto the
constraint polytope.
"""

from .fop import Fop
from .gaussian import gauss_hermite, gardner_rs, log_gauss_tail, mills, rs_capacity

__version__ = "0.1.0"

__all__ = [
    "Fop",
    "gauss_hermite",
    "gardner_rs",
    "log_gauss_tail",
    "mills",
    "rs_capacity",
    "__version__",
]
