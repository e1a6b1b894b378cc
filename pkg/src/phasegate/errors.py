"""Exception types shared across the package."""


class ContractViolation(ValueError):
    """A caller broke an operation's documented contract."""


class ConfigError(ValueError):
    """Invalid configuration file, override, or option value."""


class TrainingDivergence(RuntimeError):
    """Training produced a non-finite loss or parameter."""

    def __init__(self, epoch, message=""):
        self.epoch = epoch
        super().__init__(message or f"training diverged at epoch {epoch}")
