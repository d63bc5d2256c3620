"""Exception hierarchy shared by all modules."""


class PVMixedError(Exception):
    """Base class for domain errors (CLI exit code 1)."""


class DataFormatError(PVMixedError):
    """Malformed input file; carries the offending line number when known."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class StructureError(PVMixedError):
    """Broken nesting or a higher-level covariate varying inside its unit."""


class EmptyAnalysisError(PVMixedError):
    pass


class RankDeficiencyError(PVMixedError):
    def __init__(self, message, columns=()):
        self.columns = list(columns)
        super().__init__(message)


class IllConditionedError(PVMixedError):
    def __init__(self, message, condition=float("inf")):
        self.condition = condition
        super().__init__(f"{message} (condition estimate {condition:.3g})")


class NonFiniteGradientError(PVMixedError):
    def __init__(self, coordinate):
        self.coordinate = coordinate
        super().__init__(f"non-finite gradient at coordinate {coordinate}")


class ValidationError(PVMixedError):
    pass
