"""Error types raised by the engine.

Every error carries the process exit code the CLI maps it to:
2 for usage, configuration and data problems, 3 for numeric failures.
"""

USAGE_EXIT_CODE = 2
NUMERIC_EXIT_CODE = 3


class EngineError(Exception):
    exit_code = USAGE_EXIT_CODE


class ConfigError(EngineError, ValueError):
    pass


class BadParam(EngineError, ValueError):
    pass


class DimMismatch(EngineError, ValueError):
    pass


class IdOutOfRange(EngineError, IndexError):
    pass


class ZeroNormError(EngineError, ValueError):
    pass


class NonFinite(EngineError, ArithmeticError):
    exit_code = NUMERIC_EXIT_CODE


class NonFiniteGradient(NonFinite):
    pass


class ParseError(EngineError, ValueError):
    def __init__(self, path, line_no, reason):
        self.path = str(path)
        self.line_no = line_no
        self.reason = reason
        super().__init__(f"{self.path}:{line_no}: {reason}")


class EmptySplitError(EngineError, ValueError):
    pass


class NoNegativesError(EngineError, ValueError):
    pass


class DegenerateSpec(EngineError, ValueError):
    pass


class BadDistribution(EngineError, ValueError):
    pass


class NoCandidates(EngineError, ValueError):
    pass


class EmptyEval(EngineError, ValueError):
    pass


class EmptySample(EngineError, ValueError):
    pass


class EmptyFnList(EngineError, ValueError):
    pass


class IncompatibleCheckpoint(EngineError, ValueError):
    pass


class SkippedAdvStep(Exception):
    """Raised by adv_step once the adversarial epoch budget is spent. Not an error."""
