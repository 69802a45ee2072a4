"""Exception hierarchy shared across the package.

The CLI maps these onto stable exit codes, so new error conditions should
reuse one of the classes below rather than raising bare ValueError.
"""


class OceanDiffError(Exception):
    """Base class for all package errors."""


class ValidationError(OceanDiffError):
    """Inputs violate a documented precondition (shapes, flags, ranges)."""


class FormatError(OceanDiffError):
    """A file on disk is not a well-formed OSTX/checkpoint/manifest."""


class ConfigError(OceanDiffError):
    """A configuration value or combination is unusable."""


class NumericError(OceanDiffError):
    """A computation produced non-finite values (training/sampling divergence)."""
