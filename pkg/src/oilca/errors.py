"""Exception hierarchy shared by every stage of the pipeline."""
from contextlib import contextmanager


class OilcaError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 1


class DimensionError(OilcaError, ValueError):
    pass


class ContractError(OilcaError, ValueError):
    pass


class NumericError(OilcaError, FloatingPointError):
    exit_code = 4


class CategoryError(OilcaError, ValueError):
    pass


class ConfigError(OilcaError, ValueError):
    exit_code = 2


class InsufficientDataError(OilcaError, ValueError):
    pass


class FormatError(OilcaError, ValueError):
    pass


class TrainingDivergedError(NumericError):
    pass


@contextmanager
def diverged_at(where):
    """Re-raise a non-finite value inside a training step as divergence at ``where``."""
    try:
        yield
    except TrainingDivergedError:
        raise
    except NumericError as exc:
        raise TrainingDivergedError(f"diverged at {where}: {exc}") from exc


class StalenessError(OilcaError, RuntimeError):
    pass


class PrerequisiteError(OilcaError, RuntimeError):
    exit_code = 3


class DegenerateVarianceError(OilcaError, ValueError):
    pass
