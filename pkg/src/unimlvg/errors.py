"""Exception types shared across the package.

Each maps onto one CLI exit code (see :mod:`unimlvg.cli`).
"""


class UniMLVGError(Exception):
    exit_code = 1


class ValidationError(UniMLVGError, ValueError):
    """Invalid input: bad geometry, inconsistent shapes, refused I/O."""

    exit_code = 2


class DimensionError(ValidationError):
    pass


class VocabularyError(ValidationError, KeyError):
    def __str__(self) -> str:  # KeyError quotes its message otherwise
        return Exception.__str__(self)


class GenerationError(ValidationError):
    """A scene spec that cannot be realised (e.g. more actors than lane slots)."""


class NumericError(UniMLVGError, ArithmeticError):
    """Non-finite values during evaluation, training or sampling."""

    exit_code = 3


class EvaluationError(NumericError):
    pass


class AcceptanceError(UniMLVGError):
    exit_code = 4
