"""Exception taxonomy shared across the package."""


class StovarError(Exception):
    """Base class for all package-specific errors."""


class InputError(StovarError, ValueError):
    """Malformed or inconsistent arguments (dimension mismatch, bad grid, ...)."""


class CapabilityError(StovarError, RuntimeError):
    """A requested computation route is not available for the given inputs."""


class SimulationError(StovarError, RuntimeError):
    """Coefficient evaluation produced non-finite values during path simulation."""


class EstimationError(StovarError, RuntimeError):
    """A statistical estimator cannot be formed (too few samples, zero variance)."""


class ScenarioError(StovarError, ValueError):
    """Scenario file failed to parse or to resolve against the registries."""
