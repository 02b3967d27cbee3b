"""Biharmonic plate solvers: C0-hybrid high-order and C0 interior-penalty DG.

Cell unknowns are continuous piecewise polynomials of degree k+2, face
unknowns (HHO only) approximate the normal derivative with degree-k
polynomials on the mesh skeleton.  Clamped ("I") and simply supported
("II") boundary conditions are supported, together with volume loads,
line (Dirac) loads, and non-homogeneous boundary data.
"""

from .errors import FactorizationError, InputError

__version__ = "0.1.0"

__all__ = ["InputError", "FactorizationError", "__version__"]
