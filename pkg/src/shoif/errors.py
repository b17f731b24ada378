"""Exception hierarchy shared by every module.

Validation problems derive from :class:`ValidationError` (CLI exit code 2);
rank failures of a Gram matrix raise :class:`SingularGram` (exit code 3).
"""

from __future__ import annotations


class ShoifError(Exception):
    """Base class for all package errors."""

    def to_dict(self) -> dict:
        out = {"error": type(self).__name__, "message": str(self)}
        for key in ("row", "field", "pointer"):
            value = getattr(self, key, None)
            if value is not None:
                out[key] = value
        return out


class ValidationError(ShoifError):
    """Bad input: shapes, ranges, domains, configuration."""

    def __init__(self, message: str, *, row: int | None = None, field: str | None = None,
                 pointer: str | None = None):
        super().__init__(message)
        self.row = row
        self.field = field
        self.pointer = pointer


class ArgumentError(ValidationError):
    pass


class ShapeError(ValidationError):
    pass


class DomainViolation(ValidationError):
    pass


class DimensionTooLarge(ValidationError):
    pass


class EmptyData(ValidationError):
    pass


class Underdetermined(ValidationError):
    pass


class NuisanceBoundViolation(ValidationError):
    """Fitted nuisance values outside the configured bounds."""


class TooLargeForBruteForce(ValidationError):
    pass


class OrderTooHigh(ValidationError):
    pass


class DegenerateScale(ValidationError):
    pass


class ConfigError(ValidationError):
    """Invalid experiment configuration; ``pointer`` is a JSON pointer."""


class PerturbationInfeasible(ShoifError):
    pass


class UnstableResampling(ShoifError):
    pass


class SingularGram(ShoifError):
    """Numerical rank of a weighted basis matrix below the dictionary size."""

    def __init__(self, message: str, *, rank: int | None = None,
                 smallest_singular_value: float | None = None):
        super().__init__(message)
        self.rank = rank
        self.smallest_singular_value = smallest_singular_value

    def to_dict(self) -> dict:
        out = super().to_dict()
        out["rank"] = self.rank
        out["smallest_singular_value"] = self.smallest_singular_value
        return out
