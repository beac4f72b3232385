"""Exception hierarchy for the EEG decoding pipeline"""


class BCIError(Exception):
    """Base class for every error raised deliberately by robust_bci"""


class ValidationError(BCIError, ValueError):
    """Invalid argument or violated precondition"""


class DimensionError(ValidationError):
    """Tensor shapes do not agree"""


class NotSymmetricError(ValidationError):
    """Matrix expected to be symmetric is not"""


class NumericError(BCIError, ArithmeticError):
    """Iterative numerical routine failed to converge"""


class TapeUsageError(BCIError, RuntimeError):
    """Gradient tape used incorrectly"""


class UnsupportedOperationError(BCIError, NotImplementedError):
    """Operation is outside what the pipeline supports"""


class LeakageError(BCIError, RuntimeError):
    """Attempt to fit anything on held-out test trials"""


class FormatError(BCIError, ValueError):
    """Malformed on-disk artifact"""


class BadMagicError(FormatError):
    """File does not start with the expected magic bytes"""


class VersionMismatchError(FormatError):
    """File written by an unsupported format version"""


class TruncatedFileError(FormatError):
    """File ends before the declared payload"""


class NonFinitePayloadError(FormatError):
    """Payload contains NaN or Inf"""


class ShapeMismatchError(FormatError):
    """Stored tensor shapes disagree with the declared configuration"""
