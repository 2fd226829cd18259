"""Exception types raised across the package."""


class QDemuxError(Exception):
    """Base class for all package errors."""


class InvalidInputError(QDemuxError, ValueError):
    pass


class ConfigError(QDemuxError, ValueError):
    def __init__(self, key, message=None):
        self.key = key
        super().__init__(message or f"invalid or missing config key {key!r}")


class FitError(QDemuxError):
    """Raised when a fit does not converge or the data are degenerate.

    ``best`` holds the best parameter iterate reached before giving up.
    """

    def __init__(self, message, best=None, iterations=0):
        super().__init__(message)
        self.best = best
        self.iterations = iterations


class NormalizationError(QDemuxError):
    pass


class InsufficientSpanError(QDemuxError):
    pass


class OrderingError(QDemuxError, ValueError):
    def __init__(self, index, message):
        self.index = index
        super().__init__(f"record {index}: {message}")


class TagFormatError(QDemuxError):
    pass


class TruncationError(TagFormatError):
    def __init__(self, offset, message=None):
        self.offset = offset
        super().__init__(message or f"truncated record at octet offset {offset}")


class CorruptionError(TagFormatError):
    def __init__(self, index, message=None):
        self.index = index
        super().__init__(message or f"per-channel tick regression at record {index}")


class CsvParseError(QDemuxError, ValueError):
    def __init__(self, line, message):
        self.line = line
        super().__init__(f"line {line}: {message}")
