"""Exception hierarchy shared across the package."""


class OrdinalCoralError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(OrdinalCoralError, ValueError):
    pass


class InvalidInputError(OrdinalCoralError, ValueError):
    pass


class InvalidLabelError(InvalidInputError):
    pass


class InconsistentLabelError(InvalidLabelError):
    """Extended label row is not of the form 1...10...0."""


class InvalidConfigError(OrdinalCoralError, ValueError):
    pass


class StateError(OrdinalCoralError, RuntimeError):
    """An operation was called out of order (e.g. backward before forward)."""


class DegenerateBatchError(OrdinalCoralError, ValueError):
    pass


class EmptyCohortError(OrdinalCoralError, ValueError):
    pass


class ImputationError(OrdinalCoralError, ValueError):
    def __init__(self, subject, feature, message=None):
        self.subject = subject
        self.feature = feature
        super().__init__(
            message or f"no eligible neighbour to impute subject {subject!r}, feature {feature!r}"
        )


class ParseError(OrdinalCoralError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class InsufficientDataError(OrdinalCoralError, ValueError):
    pass


class TrainingError(OrdinalCoralError, RuntimeError):
    """Training diverged (non-finite loss or parameters)."""


class FoldError(OrdinalCoralError, RuntimeError):
    def __init__(self, fold_index, cause):
        self.fold_index = fold_index
        self.cause = cause
        super().__init__(f"fold {fold_index} failed: {cause}")
