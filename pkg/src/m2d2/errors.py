"""Exception types shared across the package."""


class M2d2Error(Exception):
    """Base class for all package errors."""


class ShapeError(M2d2Error, ValueError):
    """Operand shapes do not conform for the requested operation."""


class ContractError(M2d2Error, ValueError):
    """A documented precondition was violated by the caller."""


class DecompositionError(M2d2Error, ArithmeticError):
    """Cholesky factorization hit a non-positive pivot."""

    def __init__(self, pivot_index, pivot_value):
        self.pivot_index = int(pivot_index)
        self.pivot_value = float(pivot_value)
        super().__init__(
            f"matrix is not positive definite: pivot {self.pivot_index} = {self.pivot_value:.3e}"
        )


class OracleError(M2d2Error, ArithmeticError):
    """Finite-difference oracle evaluated to a non-finite value."""


class ConfigError(M2d2Error, ValueError):
    """Invalid configuration value; ``field`` names the offending key."""

    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")


class FormatError(M2d2Error, ValueError):
    """Malformed tensor or checkpoint file; ``field`` names the bad part."""

    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")


class IncompatibleCheckpointError(M2d2Error, ValueError):
    """Checkpoint tensors do not match the network configuration."""


class TrainingError(M2d2Error, RuntimeError):
    """A training step failed; carries the epoch and step indices."""

    def __init__(self, epoch, step, cause):
        self.epoch = epoch
        self.step = step
        super().__init__(f"training aborted at epoch {epoch}, step {step}: {cause}")
