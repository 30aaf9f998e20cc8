"""Exception hierarchy shared by every zsqbench module."""


class ZSQError(Exception):
    """Base class for all errors raised by zsqbench."""


class ShapeError(ZSQError, ValueError):
    """Operand shapes are incompatible with an operation."""


class ParameterError(ZSQError, ValueError):
    """A hyperparameter or argument lies outside its valid domain."""


class DomainError(ZSQError, ValueError):
    """Input values lie outside the mathematical domain of an operation."""


class ContractError(ZSQError, ValueError):
    """A caller violated a documented pre-condition."""


class StateError(ZSQError, RuntimeError):
    """An object is in the wrong state for the requested operation."""


class NumericError(ZSQError, FloatingPointError):
    """A non-finite value appeared where finite values are required."""


class BuildError(ZSQError, ValueError):
    """A layer specification does not compose."""


class FormatError(ZSQError, ValueError):
    """A file on disk does not match its declared format."""


class VersionError(ZSQError, ValueError):
    """A file uses an unknown format version or layer kind."""


class TrainingError(ZSQError, RuntimeError):
    """Training or synthesis diverged."""


class ConfigError(ZSQError, ValueError):
    """A configuration document is malformed."""


class CalibrationError(ZSQError, ValueError):
    """Activation-range calibration received no data."""
