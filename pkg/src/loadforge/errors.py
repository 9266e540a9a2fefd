"""Exception hierarchy shared by every loadforge module.

Plain ``OSError`` is used for I/O failures; everything raised on purpose by
this package derives from :class:`LoadForgeError`.
"""


class LoadForgeError(Exception):
    """Base class for all loadforge errors."""


class InvalidArgument(LoadForgeError, ValueError):
    pass


class Unsupported(LoadForgeError):
    pass


# -- container format -------------------------------------------------------

class FormatError(LoadForgeError):
    """Bytes do not follow the expected file layout."""


class TruncatedFile(FormatError):
    pass


class CorruptIndex(FormatError):
    pass


class CorruptRecord(FormatError):
    def __init__(self, index, message=None):
        self.index = index
        super().__init__(message or f"record {index} failed CRC check")


class PayloadError(FormatError):
    pass


class DuplicateKey(LoadForgeError, ValueError):
    pass


class EmptyInput(LoadForgeError, ValueError):
    pass


class IndexOutOfRange(LoadForgeError, IndexError):
    pass


# -- datasets / pipeline ----------------------------------------------------

class EmptyDataset(LoadForgeError, ValueError):
    pass


class PipelineError(LoadForgeError):
    """A pipeline worker failed; ``key`` names the sample being processed."""

    def __init__(self, key, cause=None):
        self.key = key
        self.cause = cause
        super().__init__(f"worker failed on sample {key!r}: {cause!r}")


# -- trainer ----------------------------------------------------------------

class DimMismatch(LoadForgeError, ValueError):
    pass


class SingularHessian(LoadForgeError, ArithmeticError):
    pass


# -- bench ------------------------------------------------------------------

class MissingArtifact(LoadForgeError):
    pass


class EmptyReport(LoadForgeError, ValueError):
    pass
