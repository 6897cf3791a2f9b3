# dafar/errors.py
# Named exceptions raised across the package.
#
# Each one subclasses the builtin it refines, so callers that only care about
# ValueError / FileNotFoundError keep working. Only the CLI catches these.

from __future__ import annotations


class ConfigError(ValueError):
    """Invalid configuration value or flag combination (CLI exit code 2)."""


class DatasetFileMissingError(FileNotFoundError):
    """A raw dataset file expected under the data root does not exist."""


class BadMagicError(ValueError):
    """An IDX file starts with the wrong magic number."""


class TruncatedRecordError(ValueError):
    """A dataset file ends in the middle of a record."""


class ShapeMismatchError(ValueError):
    """Consecutive layers, or an input and the model, disagree on shape."""


class NumericalDivergenceError(ArithmeticError):
    """A loss became NaN or infinite during training."""


class CalibrationMismatchError(RuntimeError):
    """A calibration record belongs to a different model checkpoint."""


class AcceptanceFailure(RuntimeError):
    """An invariant check or acceptance gate failed (CLI exit code 1)."""
