"""Exception types shared across the package."""


class TorsdError(Exception):
    pass


class ConfigSyntaxError(TorsdError):
    pass


class ConfigValidationError(TorsdError, ValueError):
    def __init__(self, key, message):
        self.key = key
        super().__init__(f"{key}: {message}")


class SamplingInfeasibleError(TorsdError):
    pass


class InvalidImageError(TorsdError, ValueError):
    pass


class InvalidTripletError(TorsdError, ValueError):
    pass


class ShapeError(TorsdError, ValueError):
    def __init__(self, message, expected=None, actual=None):
        if expected is not None or actual is not None:
            message = f"{message} (expected {expected}, got {actual})"
        super().__init__(message)
        self.expected = expected
        self.actual = actual


class StateError(TorsdError, RuntimeError):
    pass


class ArgumentError(TorsdError, ValueError):
    pass


class DegenerateError(TorsdError, ValueError):
    pass


class DivergenceError(TorsdError, RuntimeError):
    """Raised when a training step produces a non-finite loss."""

    def __init__(self, breakdown, step=None):
        self.breakdown = breakdown
        self.step = step
        super().__init__(f"non-finite loss at step {step}: {breakdown}")


class CheckpointError(TorsdError, OSError):
    def __init__(self, message, name=None):
        self.name = name
        super().__init__(message if name is None else f"{name}: {message}")


class DatasetError(TorsdError, OSError):
    pass
