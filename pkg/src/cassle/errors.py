"""Exception hierarchy.

Every error carries a stable ``code`` string so the CLI and reports can
classify failures without matching on message text.
"""

from __future__ import annotations


class CassleError(Exception):
    code = "ERROR"

    def __init__(self, message: str, *, field: str | None = None):
        self.field = field
        if field:
            message = f"{field}: {message}"
        super().__init__(message)


class ShapeError(CassleError, ValueError):
    code = "SHAPE_ERROR"


class DomainError(CassleError, ValueError):
    code = "DOMAIN_ERROR"


class ContractError(CassleError, ValueError):
    code = "CONTRACT_ERROR"


class DegenerateInputError(CassleError, ValueError):
    code = "DEGENERATE_INPUT"


class ConfigError(CassleError, ValueError):
    code = "CONFIG_ERROR"


class ParseError(CassleError, ValueError):
    code = "PARSE_ERROR"


class FormatError(CassleError, ValueError):
    code = "FORMAT_ERROR"


class NumericError(CassleError, ArithmeticError):
    code = "NUMERIC_ERROR"


class StratificationError(CassleError, ValueError):
    code = "STRATIFICATION_ERROR"


class UndefinedMetricError(CassleError, ValueError):
    code = "UNDEFINED_METRIC"
