"""Exception hierarchy shared by every pipeline stage."""


class MSTNError(Exception):
    """Base class for all package errors."""


class DataError(MSTNError):
    """Input data cannot be used (bad file, unsupported content)."""


class MalformedInput(DataError):
    pass


class UnsupportedTimeSignature(DataError):
    pass


class UnrepresentableDuration(DataError):
    """A note boundary falls off the 6-ticks-per-beat grid."""


class OutOfRange(DataError):
    """A transposed pitch leaves the supported pitch range."""


class EmptyCorpus(DataError):
    pass


class MalformedSequence(DataError):
    """A token sequence violates the frame layout."""


class UnknownTemplate(MSTNError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class SequenceTooLong(MSTNError, ValueError):
    pass


class ShapeMismatch(MSTNError, ValueError):
    pass


class NonScalarLoss(MSTNError, ValueError):
    pass


class LengthMismatch(MSTNError, ValueError):
    pass


class MotifLengthError(MSTNError, ValueError):
    pass


class TrainingDiverged(MSTNError):
    """Loss became NaN or infinite."""
