"""Exception hierarchy shared by every module of the package."""


class HDMIError(Exception):
    """Base class for all errors raised by :mod:`hdmi`."""


class ShapeError(HDMIError, ValueError):
    """Array shapes do not agree with an operation's contract."""


class DomainError(HDMIError, ValueError):
    """An argument lies outside the mathematical domain of an operation."""


class InputError(HDMIError, ValueError):
    """Malformed user input (token ids, suite names, empty corpora, ...)."""


class CapacityError(HDMIError):
    """A fixed capacity (sequence length, template space) would be exceeded."""


class ConfigurationError(HDMIError, ValueError):
    """Inconsistent configuration values."""


class DegenerateLabelError(HDMIError, ValueError):
    """A label set lacks the class diversity an operation needs."""


class ObjectiveError(HDMIError, ValueError):
    """Invalid margin objective (overlapping or empty token sets)."""


class DegenerateInstanceError(HDMIError, ValueError):
    """A theorem instance for which the stated quantities are undefined."""


class LeakageError(HDMIError, AssertionError):
    """A split-provenance assertion failed."""


class ProbeAccuracyError(HDMIError):
    """A probe did not reach the accuracy gate, even after a retry."""
