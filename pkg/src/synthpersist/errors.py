"""Exception hierarchy shared by all modules."""


class SynthPersistError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(SynthPersistError, ValueError):
    """A band, experiment or sampling configuration is unusable."""


class InvalidInputError(SynthPersistError, ValueError):
    """Arguments have the wrong shape, length, range or contain non-finite values."""


class DegenerateDataError(SynthPersistError, ValueError):
    """Data has zero variance where a spread is required (z-scoring, ICC, correlation)."""


class UndefinedSimilarityError(DegenerateDataError):
    """Cosine similarity requested for a zero-length vector."""


class QuotaUnreachableError(SynthPersistError, RuntimeError):
    """Banded assembly ran out of attempts before filling every quota.

    ``shortfall`` maps band name to the number of features still missing.
    """

    def __init__(self, message, shortfall):
        super().__init__(message)
        self.shortfall = dict(shortfall)


class ParseError(SynthPersistError, ValueError):
    """A database or config file could not be parsed.

    ``row`` and ``column`` locate the offending cell when known (1-based row
    numbers counting the header as row 1).
    """

    def __init__(self, message, row=None, column=None):
        where = []
        if row is not None:
            where.append(f"row {row}")
        if column is not None:
            where.append(f"column {column!r}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)
        self.row = row
        self.column = column


class PersistenceError(SynthPersistError, OSError):
    """Reading or writing a file failed."""
