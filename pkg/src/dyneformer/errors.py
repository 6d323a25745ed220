"""Exception hierarchy shared by every stage of the pipeline."""


class DyneformerError(Exception):
    pass


class ConfigError(DyneformerError, ValueError):
    pass


class ParseError(DyneformerError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class DuplicateError(ParseError):
    pass


class GapError(DyneformerError, ValueError):
    pass


class FitError(DyneformerError, ValueError):
    pass


class DataError(DyneformerError, ValueError):
    pass


class InputTooShort(DataError):
    pass


class DimensionError(DyneformerError, ValueError):
    pass


class StateError(DyneformerError, RuntimeError):
    pass


class TrainingDiverged(DyneformerError, RuntimeError):
    pass


class ProvenanceError(DyneformerError, RuntimeError):
    pass


class EmptySubset(DyneformerError, ValueError):
    pass


class DegenerateBilling(DyneformerError, ZeroDivisionError):
    pass


class CoverageError(DyneformerError, KeyError):
    pass
