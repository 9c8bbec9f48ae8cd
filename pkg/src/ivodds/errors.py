"""Exception hierarchy.

Every error carries a short machine-readable ``code`` so the CLI can map it
onto a structured error object and a non-zero exit status.
"""

from __future__ import annotations

from typing import Any


class IVOddsError(Exception):
    """Base class for all package errors."""

    code = "error"
    exit_code = 3

    def to_dict(self) -> dict[str, Any]:
        return {"type": type(self).__name__, "code": self.code, "message": str(self)}


# -- data / formula ---------------------------------------------------------


class FormulaError(IVOddsError, ValueError):
    code = "formula_error"
    exit_code = 2


class MissingColumn(IVOddsError, KeyError):
    code = "missing_column"
    exit_code = 2

    def __str__(self) -> str:  # KeyError quotes its message otherwise
        return str(self.args[0]) if self.args else ""


class EmptyAfterFiltering(IVOddsError, ValueError):
    code = "empty_after_filtering"
    exit_code = 2


class NonBinaryResponse(IVOddsError, ValueError):
    code = "non_binary_response"


class NonBinaryOutcome(NonBinaryResponse):
    code = "non_binary_outcome"
    exit_code = 2


class DegenerateTable(IVOddsError, ValueError):
    code = "degenerate_table"


# -- model fitting ----------------------------------------------------------


class RankDeficient(IVOddsError, ValueError):
    code = "rank_deficient"


class Separation(IVOddsError, ValueError):
    code = "separation"


class SpecMismatch(IVOddsError, ValueError):
    code = "spec_mismatch"


class SingularBread(IVOddsError, ValueError):
    code = "singular_bread"


class WeakInstrument(IVOddsError, ValueError):
    code = "weak_instrument"


class CongenialityError(IVOddsError, ValueError):
    """Association model lacks an intercept or an unrestricted instrument main effect."""

    code = "congeniality_guard"
    exit_code = 2


# -- root finding -----------------------------------------------------------


class NoRoot(IVOddsError, ValueError):
    code = "no_root"

    def __init__(self, message: str, diagnostics: Any = None):
        super().__init__(message)
        self.diagnostics = diagnostics

    def to_dict(self) -> dict[str, Any]:
        out = super().to_dict()
        if self.diagnostics is not None:
            out["diagnostics"] = self.diagnostics.to_dict()
        return out


class NegativeDiscriminant(NoRoot):
    code = "negative_discriminant"


class NoRootAtLevel(NoRoot):
    code = "no_root_at_level"

    def __init__(self, level: float, diagnostics: Any = None):
        super().__init__(f"estimating equation has no root at exposure level {level:g}", diagnostics)
        self.level = level

    def to_dict(self) -> dict[str, Any]:
        out = super().to_dict()
        out["level"] = self.level
        return out


class MultipleRootsAmbiguous(IVOddsError, ValueError):
    code = "multiple_roots_ambiguous"

    def __init__(self, message: str, diagnostics: Any = None):
        super().__init__(message)
        self.diagnostics = diagnostics


class MissingLevel(IVOddsError, KeyError):
    code = "missing_level"

    def __str__(self) -> str:
        return str(self.args[0]) if self.args else ""


class Nonconvergence(IVOddsError, RuntimeError):
    code = "nonconvergence"

    def __init__(self, message: str, trace: list[dict[str, float]] | None = None):
        super().__init__(message)
        self.trace = trace or []

    def to_dict(self) -> dict[str, Any]:
        out = super().to_dict()
        out["iterations"] = len(self.trace)
        return out


# -- simulation -------------------------------------------------------------


class NoExactSolution(IVOddsError, ValueError):
    code = "no_exact_solution"


class BracketFailure(IVOddsError, ValueError):
    code = "bracket_failure"


class OutcomeMeanOutOfRange(UserWarning):
    """Probit-to-logit conversion used outside outcome means of 10%-90%."""
