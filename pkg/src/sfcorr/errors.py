"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: configuration problems exit 2, data
problems exit 3 and numeric failures exit 4.
"""


class SFCError(Exception):
    exit_code = 1


class ConfigError(SFCError, ValueError):
    exit_code = 2


class ShapeError(ConfigError):
    pass


class DataError(SFCError):
    exit_code = 3


class ParseError(DataError):
    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericError(SFCError, ArithmeticError):
    exit_code = 4


class GraphError(NumericError):
    pass


class EmptyMaskError(NumericError):
    pass


class GradCheckError(NumericError):
    def __init__(self, op, index, rel_err, tol):
        super().__init__(f"gradient check failed for {op} at index {index}: rel. err {rel_err:.3e} > {tol:.1e}")
        self.op = op
        self.index = index
        self.rel_err = rel_err
