"""Exception hierarchy shared across the package."""


class GPSVIError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(GPSVIError, ValueError):
    pass


class DomainError(GPSVIError, ValueError):
    pass


class RankError(GPSVIError, ValueError):
    pass


class TapeError(GPSVIError, RuntimeError):
    pass


class ConfigError(GPSVIError, ValueError):
    pass


class ParseError(GPSVIError, ValueError):
    def __init__(self, message, line=None, column=None):
        super().__init__(message)
        self.line = line
        self.column = column


class VocabError(GPSVIError, ValueError):
    pass


class EmptyDatasetError(GPSVIError, ValueError):
    pass


class UnknownIdError(GPSVIError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else "unknown id"


class DegenerateGroupError(GPSVIError, ValueError):
    pass


class UndefinedMetricError(GPSVIError, ValueError):
    pass


class NaNLossError(GPSVIError, RuntimeError):
    def __init__(self, message, batch_index=None, dump=None):
        super().__init__(message)
        self.batch_index = batch_index
        self.dump = dump
