"""Exception hierarchy shared across the package."""


class FFCACError(Exception):
    """Base class for all package errors."""


class InvalidConfig(FFCACError, ValueError):
    pass


class InvalidSpec(FFCACError, ValueError):
    pass


class InputTooShort(FFCACError, ValueError):
    pass


class MissingAudio(FFCACError, FileNotFoundError):
    def __init__(self, path):
        super().__init__(f"missing audio file: {path}")
        self.path = str(path)


class CacheInvalidated(FFCACError):
    pass


class NumericalError(FFCACError, ArithmeticError):
    def __init__(self, where):
        super().__init__(f"non-finite value in {where}")
        self.where = where


class IncompatibleCheckpoint(FFCACError):
    pass


class CorruptCheckpoint(FFCACError):
    pass


class IncompatibleBranch(FFCACError, ValueError):
    pass


class NoSuchBranch(FFCACError, IndexError):
    pass


class InvalidVariant(FFCACError, ValueError):
    pass


class EmptyClass(FFCACError, ValueError):
    pass


class SingularCovariance(FFCACError, ArithmeticError):
    pass


class NoClasses(FFCACError, ValueError):
    pass


class DuplicateClass(FFCACError, ValueError):
    pass


class LabelOutOfRange(FFCACError, IndexError):
    pass


class InvalidStep(FFCACError, ValueError):
    pass


class IncompleteReplayStore(FFCACError, KeyError):
    pass


class InsufficientData(FFCACError, ValueError):
    pass


class ShapeError(FFCACError, ValueError):
    pass


class EmptyInput(FFCACError, ValueError):
    pass


class InvalidInput(FFCACError, ValueError):
    pass


class UnsupportedParameters(FFCACError, ValueError):
    pass


class RequiresTwoMethods(FFCACError, ValueError):
    pass


class DegenerateNorm(UserWarning):
    """A vector norm fell under the floor and was clamped."""
