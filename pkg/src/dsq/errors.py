"""Exception hierarchy shared by every module.

Each error carries a stable machine-readable ``code`` and the process exit
status the CLI maps it to.
"""


class DsqError(Exception):
    code = "ERR_GENERIC"
    exit_code = 1


class InvalidInputError(DsqError, ValueError):
    code = "ERR_INVALID_INPUT"
    exit_code = 3


class ParseError(DsqError, ValueError):
    code = "ERR_PARSE"
    exit_code = 3


class BadMagicError(ParseError):
    code = "ERR_BAD_MAGIC"


class VersionError(ParseError):
    code = "ERR_VERSION"


class TruncatedError(ParseError):
    code = "ERR_TRUNCATED"


class DimOverflowError(ParseError):
    code = "ERR_DIM_OVERFLOW"


class ChecksumError(ParseError):
    code = "ERR_CHECKSUM"


class IncompatibleError(DsqError, ValueError):
    code = "ERR_INCOMPATIBLE"
    exit_code = 4


class DimensionMismatchError(IncompatibleError):
    code = "ERR_DIM_MISMATCH"


class IncompatibleCodebookError(IncompatibleError):
    code = "ERR_INCOMPATIBLE_CODEBOOK"


class ConfigMismatchError(IncompatibleError):
    code = "ERR_CONFIG_MISMATCH"


class InfeasibleError(DsqError, ValueError):
    code = "ERR_INFEASIBLE"
    exit_code = 5


class UndefinedCorrelationError(InfeasibleError):
    code = "ERR_UNDEFINED_CORRELATION"


class NotFittedError(DsqError, RuntimeError):
    code = "ERR_NOT_FITTED"
    exit_code = 4
