"""Exception hierarchy.

Errors are grouped by the exit code the command line reports for them
(see :mod:`debias.cli`).
"""


class DebiasError(Exception):
    """Base class for every error raised by this package."""

    exit_code = 1


class ConfigError(DebiasError, ValueError):
    exit_code = 2


class DataError(DebiasError, ValueError):
    exit_code = 3


class NumericalError(DebiasError, ArithmeticError):
    exit_code = 4


# data-level problems
class MissingField(DataError):
    pass


class NonFinite(DataError):
    pass


class UnsupportedObservation(DataError):
    """An observation lies outside the support of every biasing function."""


class AllZeroRow(DataError):
    pass


class EmptyClassPool(DataError):
    pass


class EmptyModalityPool(DataError):
    pass


class DegeneratePopulation(DataError):
    pass


class UnlabeledObservation(DataError):
    pass


class MissingEmbedding(DataError):
    pass


class MissingKey(DataError):
    pass


class LengthMismatch(DataError):
    pass


class MisalignedWeights(DataError):
    pass


class NonPositiveW(DataError):
    pass


class UnsupportedShapes(ConfigError):
    pass


# numerical failures
class Diverged(NumericalError):
    pass


class NotConnected(NumericalError):
    def __init__(self, message, components=None):
        super().__init__(message)
        self.components = components or []


class ZeroNormalizer(NumericalError):
    pass
