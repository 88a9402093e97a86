"""Exception hierarchy shared by all modules."""

from __future__ import annotations


class AnalogVmmError(Exception):
    """Base class for every error raised by this package."""


class ConfigurationError(AnalogVmmError, ValueError):
    """Invalid configuration values (negative spreads, unknown keys, ...)."""


class ContractViolation(AnalogVmmError, ValueError):
    """An operation was called with arguments outside its documented domain."""


class PartitionRequired(ContractViolation):
    """An input vector is longer than a single tile can accept."""


class IngestionError(AnalogVmmError, ValueError):
    """A dataset file is malformed. ``field`` names the offending header field."""

    def __init__(self, message: str, field: str | None = None):
        super().__init__(message)
        self.field = field


class CalibrationError(AnalogVmmError, RuntimeError):
    """A calibration routine could not reach its tolerance.

    ``offending`` lists neuron (or row) indices still outside tolerance and
    ``achieved`` holds the best figure of merit reached.
    """

    def __init__(self, message: str, offending=(), achieved: float | None = None):
        super().__init__(message)
        self.offending = list(int(i) for i in offending)
        self.achieved = achieved
