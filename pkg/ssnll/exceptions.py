class SsnllError(Exception):
    pass


class DimensionError(SsnllError):
    pass


class ProblemTooLargeError(DimensionError):
    pass


class DefinitenessError(SsnllError):
    pass


class NonPositiveVarianceError(SsnllError):
    pass


class DegenerateLikelihoodError(SsnllError):
    pass


class EvidenceUnderflowError(SsnllError):
    pass


class SampleSizeError(SsnllError, ValueError):
    pass


class OptimizationError(SsnllError):
    pass


class NonFiniteObjectiveError(OptimizationError):
    pass


class GradientCheckError(OptimizationError):
    pass


class DivergenceError(OptimizationError):
    pass


class ConfigError(SsnllError):
    def __init__(self, message: str, *, line: int = 0, field: str | None = None) -> None:
        self.line = line
        self.field = field
        prefix = f"line {line}: " if line else ""
        super().__init__(prefix + message)
