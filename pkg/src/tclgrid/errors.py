"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration or input data (CLI exit code 2)."""


class FeederError(ConfigError):
    """Feeder description is not a valid radial tree."""


class DivergenceError(RuntimeError):
    """Power-flow iteration produced a non-positive squared voltage."""

    def __init__(self, message: str, node: int | None = None):
        super().__init__(message)
        self.node = node


class InfeasibleLinearizationError(DivergenceError):
    """Linearized power flow gives a non-positive squared voltage."""


class NotConvergedError(RuntimeError):
    """A solution that did not converge was used where convergence is required."""


class InferenceError(RuntimeError):
    """Posterior over ON counts could not be formed."""
