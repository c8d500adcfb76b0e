"""Exception types shared across the package."""


class ScaleGateError(Exception):
    """Base class; the CLI maps these to exit codes."""


class DimensionError(ScaleGateError, ValueError):
    pass


class DomainError(ScaleGateError, ValueError):
    pass


class ContractError(ScaleGateError, ValueError):
    pass


class NoTierError(ScaleGateError, ValueError):
    """Raised when asking for the tier of an Unknown annotation."""


class ConfigError(ScaleGateError, ValueError):
    pass


class SamplerError(ScaleGateError, ValueError):
    pass


class LoadError(ScaleGateError, ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class CheckpointError(ScaleGateError, ValueError):
    pass


class TrainingDiverged(ScaleGateError, RuntimeError):
    """Loss went non-finite. ``last_good`` holds the bundle from the last finite step."""

    def __init__(self, step: int, last_good):
        self.step = step
        self.last_good = last_good
        super().__init__(f"non-finite loss at step {step}")
