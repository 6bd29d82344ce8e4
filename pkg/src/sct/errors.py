"""Exception hierarchy. CLI maps ConfigError/ShapeError/RankError to exit code 2."""


class SCTError(Exception):
    pass


class ShapeError(SCTError, ValueError):
    pass


class RankError(SCTError, ValueError):
    pass


class ConfigError(SCTError, ValueError):
    pass


class NumericError(SCTError, ArithmeticError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class DegenerateColumnError(SCTError, ArithmeticError):
    def __init__(self, column, message=None):
        self.column = column
        super().__init__(message or f"degenerate column {column}: matrix is rank deficient")


class ConvergenceError(SCTError, ArithmeticError):
    def __init__(self, message, residual):
        self.residual = residual
        super().__init__(f"{message} (residual {residual:.3e})")


class MaterializationError(SCTError, RuntimeError):
    pass
