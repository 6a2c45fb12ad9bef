"""Exception hierarchy.

Every error raised on bad data derives from :class:`MilaedError`, which the
CLI maps to exit code 2.
"""


class MilaedError(Exception):
    pass


# audio / features
class MalformedWav(MilaedError, ValueError):
    pass


class UnsupportedSampleRate(MilaedError, ValueError):
    pass


class UnsupportedEncoding(MilaedError, ValueError):
    pass


class InvalidRange(MilaedError, ValueError):
    pass


class ClipTooShort(MilaedError, ValueError):
    pass


# network
class IncompatibleDims(MilaedError, ValueError):
    pass


class ShapeMismatch(MilaedError, ValueError):
    pass


class StaleCache(MilaedError, RuntimeError):
    pass


class TooShallow(MilaedError, ValueError):
    pass


# MIL training
class EmptyBag(MilaedError, ValueError):
    pass


class DimensionMismatch(MilaedError, ValueError):
    pass


class StalePrediction(MilaedError, RuntimeError):
    pass


class EmptyClass(MilaedError, ValueError):
    pass


class EmptyDataset(MilaedError, ValueError):
    pass


class DivergedLoss(MilaedError, FloatingPointError):
    pass


# embeddings and file formats
class BadMagic(MilaedError, ValueError):
    pass


class DimMismatch(MilaedError, ValueError):
    pass


class TruncatedFile(MilaedError, ValueError):
    pass


class MissingClip(MilaedError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class VersionMismatch(MilaedError, ValueError):
    pass


class ChecksumMismatch(MilaedError, ValueError):
    pass


# evaluation / fusion
class EmptyResults(MilaedError, ValueError):
    pass


class NoReferenceLabel(MilaedError, ValueError):
    pass


class AllZeroWeights(MilaedError, ValueError):
    pass


class AllZeroScores(MilaedError, ValueError):
    pass


# manifests / CLI
class DuplicateId(MilaedError, ValueError):
    pass


class UnknownLabel(MilaedError, ValueError):
    pass


class MalformedLine(MilaedError, ValueError):
    pass


class InvalidConfig(MilaedError, ValueError):
    pass
