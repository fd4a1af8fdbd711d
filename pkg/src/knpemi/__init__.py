"""Finite element simulation of ionic electrodiffusion with explicit cell geometries.

The package solves the KNP-EMI equations: electroneutral Nernst-Planck ion
transport in intra- and extracellular subdomains coupled through membrane
interfaces carrying capacitive and channel currents. Subdomains are meshed
conformingly and coupled with a mortar variable (the total membrane current
density) living on the interface mesh. A constant-conductivity EMI solver on
the same meshes is included for framework comparisons, and a manufactured
solution drives the convergence harness.
"""

from .errors import ConfigurationError, GeometryError, InstabilityError, SolverError

__version__ = "0.1.0"

__all__ = [
    "ConfigurationError",
    "GeometryError",
    "InstabilityError",
    "SolverError",
    "__version__",
]
