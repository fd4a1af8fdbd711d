"""Exception types shared across the package.

The CLI maps these to exit codes: configuration errors to 2, solver
failures to 3, instability to 4.
"""


class ConfigurationError(ValueError):
    """Invalid scenario configuration or geometry description."""


class GeometryError(ValueError):
    """Mesh topology violates a structural requirement."""


class SolverError(RuntimeError):
    """Linear solve failed or did not meet the residual contract."""


class InstabilityError(RuntimeError):
    """Time stepping produced non-finite or exploding fields."""
