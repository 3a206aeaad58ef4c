"""Exception types shared across the package."""


class ConfigError(ValueError):
    """A scenario or component configuration is invalid."""


class DimensionError(ValueError):
    """An array argument does not match the grid's flattened size."""


class ModelError(ValueError):
    """A model parameter is outside its admissible set (e.g. non-SPD precision)."""


class CommandError(ValueError):
    """A commanded velocity violates the actuator bound; indicates a controller bug."""


class AssemblyError(ValueError):
    """Constraint assembly received inconsistent inputs."""


class InfeasibleProgramError(RuntimeError):
    """A per-step program has an empty feasible set (energy already violated)."""

    def __init__(self, robot: int, message: str):
        super().__init__(message)
        self.robot = robot
