"""Exception hierarchy shared across the package."""


class RainbowError(Exception):
    """Base class for all package errors."""


class ConfigError(RainbowError, ValueError):
    """Invalid configuration value or unknown configuration key."""


class InputError(RainbowError, ValueError):
    """A call received arguments that violate its preconditions."""


class NotReadyError(RainbowError, RuntimeError):
    """Replay does not yet hold enough entries for the request."""


class StateError(RainbowError, RuntimeError):
    """An operation was invoked in the wrong lifecycle state."""


class DiagnosticsError(RainbowError, FloatingPointError):
    """Training produced a non-finite value; the step was aborted."""


class SnapshotError(RainbowError, OSError):
    """A snapshot could not be written, read, or failed validation."""
