"""Exception hierarchy.

Every error carries a short ``category`` string that the CLI prints on stderr
so scripts can branch on the failure kind without parsing messages.
"""


class AgelockError(Exception):
    category = "internal"


class InvalidCodeError(AgelockError, ValueError):
    category = "invalid-code"


class DimensionError(AgelockError, ValueError):
    category = "dimension"


class CorruptFileError(AgelockError):
    category = "corrupt-file"


class FormatVersionError(CorruptFileError):
    category = "version"


class DataFormatError(AgelockError):
    category = "data-format"


class ConfigError(AgelockError):
    category = "config"


class DivergenceError(AgelockError, ArithmeticError):
    category = "divergence"


class MissingCacheError(AgelockError, RuntimeError):
    category = "missing-cache"
