"""Exception hierarchy shared by every weldmon module.

Errors fall into two families: ``DataError`` for bad inputs (files, recordings,
datasets) and ``InvariantViolation`` for internal contract breaches. The CLI
maps them to exit codes 3 and 4.
"""


class WeldMonError(Exception):
    """Base class for all weldmon errors."""


class DataError(WeldMonError, ValueError):
    """Input data does not satisfy a documented precondition."""


class InvariantViolation(WeldMonError, AssertionError):
    """An internal invariant was broken."""


# synthgen
class InvalidSpec(DataError):
    pass


# ingest
class InvalidManifest(DataError):
    pass


class CorruptFile(DataError):
    pass


class UnsupportedVersion(DataError):
    pass


class InvalidSegment(DataError):
    pass


# segment
class NoHornMove(DataError):
    pass


class NoWeldOnset(DataError):
    pass


class SegmentOutOfBounds(DataError):
    pass


# spectral
class InputTooShort(DataError):
    pass


class InvalidFilterbank(DataError):
    pass


class ShapeMismatch(DataError):
    pass


# augment
class InsufficientClassSamples(DataError):
    pass


# features
class TooFewSamples(DataError):
    pass


# model
class DegenerateDataset(DataError):
    pass


# harness
class EmptyClass(DataError):
    pass


class InsufficientSamples(DataError):
    pass


class LeakageError(InvariantViolation):
    """An evaluation sample reached a training-only code path."""


# cli
class NoData(DataError):
    """The data directory holds neither a segment set nor recordings."""
