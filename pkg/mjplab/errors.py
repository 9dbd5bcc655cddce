"""Exceptions raised by mjplab.

Everything derives from :class:`MjpError`.  Bad input (files, arguments,
shapes) raises a :class:`DataError`; numerical breakdown raises a
:class:`NumericError`.  The command-line tool maps the two families onto
different exit codes.
"""


class MjpError(Exception):
    pass


class DataError(MjpError, ValueError):
    pass


class NumericError(MjpError, ArithmeticError):
    pass


#
# Input and validation errors.
#
class DimensionMismatch(DataError):
    pass


class ShapeMismatch(DataError):
    pass


class NegativeRate(DataError):
    pass


class OutOfWindow(DataError):
    pass


class InvalidDistribution(DataError):
    pass


class EmptySeries(DataError):
    pass


class DegenerateTemperature(DataError):
    pass


class NonPositiveVariance(DataError):
    pass


class NonScalarLoss(DataError):
    pass


class ConfigError(DataError):
    pass


class SchemaMismatch(DataError):
    pass


class MalformedRecord(DataError):
    def __init__(self, path: str, linenum: int, reason: str) -> None:
        super().__init__('%s:%d: %s' % (path, linenum, reason))
        self.path = path
        self.linenum = linenum
        self.reason = reason


#
# Numerical errors.
#
class SingularMatrix(NumericError):
    pass


class NoConvergence(NumericError):
    pass


class NonFiniteState(NumericError):
    pass


class StepUnderflow(NumericError):
    pass


class NotIrreducible(NumericError):
    pass


class DegenerateSpectrum(NumericError):
    pass


class DomainError(NumericError):
    pass


class NonFiniteLoss(NumericError):
    pass
