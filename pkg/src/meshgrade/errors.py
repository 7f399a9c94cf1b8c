"""Exception hierarchy.

Every error raised by the library derives from :class:`MeshgradeError`.  The
three intermediate classes decide the CLI exit code (usage 1, data 2,
numeric 3).
"""


class MeshgradeError(Exception):
    exit_code = 2


class UsageError(MeshgradeError):
    exit_code = 1


class DataError(MeshgradeError, ValueError):
    exit_code = 2


class NumericError(MeshgradeError, ArithmeticError):
    exit_code = 3


# mesh parsing and metrics
class MalformedHeader(DataError):
    pass


class TruncatedData(DataError):
    pass


class NonFiniteCoordinate(DataError):
    pass


class SchemaError(DataError):
    pass


class LengthMismatch(DataError):
    pass


class DegenerateTriangle(DataError):
    pass


class DomainError(DataError):
    pass


class IndexOutOfRange(DataError, IndexError):
    pass


class DegenerateCell(DataError):
    def __init__(self, message, ci=None, cj=None):
        super().__init__(message)
        self.ci = ci
        self.cj = cj


# graph construction
class NonPositiveRadius(DataError):
    pass


class DimensionMismatch(DataError):
    pass


# tensors and layers
class ShapeMismatch(NumericError, ValueError):
    pass


class EmptySegment(NumericError):
    pass


class NonScalarLoss(NumericError):
    pass


class TapeConsumed(NumericError, RuntimeError):
    pass


class NondeterministicFunction(NumericError):
    pass


class EmptyGraph(NumericError):
    pass


# training and evaluation
class DatasetTooSmall(DataError):
    pass


class MixedFeatureWidth(DataError):
    pass


class InvalidTarget(DataError):
    pass


class UnnormalizedInput(NumericError, ValueError):
    pass


class NonFiniteLoss(NumericError):
    pass


class EmptySplit(DataError):
    pass


# datasets
class MissingManifest(DataError):
    pass


class NoParsableFiles(DataError):
    pass


class DimensionTooSmall(DataError):
    pass


class DefectCollapse(DataError):
    pass
