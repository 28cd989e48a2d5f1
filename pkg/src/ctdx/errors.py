"""Exception hierarchy for the ctdx pipeline.

DataError covers problems with user-supplied inputs (files, directories,
record contents); commands map it to exit code 2.  InternalError marks
violations of the pipeline's own invariants and maps to exit code 3.
"""


class CtdxError(Exception):
    """Base class for all ctdx exceptions."""


class DataError(CtdxError):
    """Invalid or inconsistent input data."""


class InternalError(CtdxError):
    """A pipeline invariant was violated; indicates a bug."""


# --- volume ingestion ---

class EmptyDirectoryError(DataError):
    """Slice directory contains no decodable image files."""


class MixedDimensionsError(DataError):
    """Slices within one volume disagree on width or height."""


class UndecodableImageError(DataError):
    """An image file could not be decoded."""


class NonPositiveWindowError(DataError):
    """HU window width must be strictly positive."""


# --- record files ---

class MalformedRecordError(DataError):
    """A line of a record file does not match the expected field layout."""

    def __init__(self, message, line_number=None):
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)
        self.line_number = line_number


class RecordInvariantError(DataError):
    """A parsed record violates a semantic invariant (e.g. probs sum != 1)."""

    def __init__(self, message, line_number=None):
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)
        self.line_number = line_number


# --- preprocessing ---

class EmptyForegroundError(DataError):
    """No pixel exceeds the foreground threshold; nothing to crop."""


class TooNarrowError(DataError):
    """Image too narrow to split into two halves."""


class ZeroTargetError(DataError):
    """Resize target must be at least one pixel."""


class EmptyInputError(DataError):
    """Sequence to resample is empty."""


class IndexOutOfRangeError(DataError):
    """Slice index outside the volume."""


# --- sampling ---

class ZeroLengthError(DataError):
    """Volume length must be at least 1."""


# --- predictors ---

class MissingPredictionError(DataError):
    """No stored prediction matches the requested key."""


class IncompleteSliceSetError(DataError):
    """Stored slice predictions do not cover every slice index."""


# --- aggregation ---

class EmptyPredictionsError(DataError):
    """Cannot aggregate an empty prediction list."""


# --- heads ---

class OutOfRangeError(DataError):
    """Epoch outside the configured schedule."""


class InvalidDistributionError(DataError):
    """Probability vector is not a valid distribution."""


class DegenerateLabelsError(DataError):
    """Training set contains a single class."""


class NonFiniteLossError(InternalError):
    """Training loss became NaN or infinite."""


class NonFiniteGradientError(InternalError):
    """Gradient check produced a non-finite value."""


class DimensionMismatchError(DataError):
    """Model and input dimensions are inconsistent."""


# --- evaluation ---

class KeyMismatchError(DataError):
    """Prediction and truth maps cover different patients."""


class EmptyEvaluationError(DataError):
    """Confusion matrix contains no samples."""


class TooFewSamplesError(DataError):
    """A class has fewer members than the requested fold count."""
