"""
Engine error hierarchy.

Every error carries the process exit code the management commands return
when it escapes: 1 usage, 2 data/format, 3 numerical failure.
"""

EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3


class EngineError(Exception):
    exit_code = EXIT_USAGE


class DimensionError(EngineError, ValueError):
    """Operand shapes do not agree."""

    def __init__(self, message, *shapes):
        if shapes:
            message = f"{message}: {' vs '.join(str(tuple(s)) for s in shapes)}"
        super().__init__(message)
        self.shapes = shapes


class RankError(DimensionError):
    """Operand has the wrong number of dimensions."""


class ArgumentError(EngineError, ValueError):
    pass


class StateError(EngineError, RuntimeError):
    """Operation called before the state it depends on exists."""


class ConfigError(EngineError):
    def __init__(self, errors):
        if isinstance(errors, str):
            errors = [errors]
        self.errors = list(errors)
        super().__init__('Invalid run config:\n  ' + '\n  '.join(self.errors))


class FormatError(EngineError):
    exit_code = EXIT_DATA


class ConsistencyError(EngineError):
    exit_code = EXIT_DATA


class NumericalError(EngineError, ArithmeticError):
    exit_code = EXIT_NUMERICAL
