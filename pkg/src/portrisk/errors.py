"""Exception hierarchy shared across the toolkit.

The CLI maps these onto exit codes: ConfigError -> 1, DataError -> 2,
NumericalError -> 3.
"""

from __future__ import annotations


class PortriskError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(PortriskError):
    """Invalid configuration, profile, or command usage."""


class DataError(PortriskError):
    """Input data violates a contract (missing file, bad schema, ...)."""


class SchemaMismatchError(DataError):
    """Model and dataset were built against different feature schemas."""


class UndefinedMetricError(DataError):
    """Metric is undefined for the given input (e.g. single-class labels)."""


class DegenerateVarianceError(DataError):
    """Statistic is degenerate (zero variance in the sample)."""


class NumericalError(PortriskError):
    """Non-finite values or divergence inside numerical routines."""
