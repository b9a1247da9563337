"""Exception types shared across the engine."""


class IsegError(Exception):
    """Base class for all engine errors."""


class DimMismatch(IsegError):
    """Operand shapes are incompatible."""


class NonFiniteInput(IsegError):
    """Input contains NaN or infinity."""


class NonScalarLoss(IsegError):
    """backward() was called on a non-scalar tensor."""


class DivisibilityViolation(IsegError):
    """Spatial dims do not satisfy a patch/window divisibility constraint."""


class OutOfBoundsClick(IsegError):
    """Click coordinates fall outside the image."""


class NoMisclassifiedPixels(IsegError):
    """Click simulation requires at least one misclassified pixel."""


class MissingWeights(IsegError):
    """An operation needing model weights was invoked without them."""


class EmptyMemory(IsegError):
    """Readout from an empty memory bank."""


class EmptyGroundTruth(IsegError):
    """Evaluation requires a nonempty ground-truth mask."""


class EmptyInput(IsegError):
    """Aggregation over an empty collection."""


class MalformedDataset(IsegError):
    """Dataset directory is empty or has unpaired files."""


class WeightsFormatError(IsegError):
    """Weight manifest or blob failed validation."""
