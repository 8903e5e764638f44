"""Exception hierarchy shared by the whole package."""


class EmberError(Exception):
    """Base class for all package errors."""


class ParseError(EmberError):
    """Malformed input file."""

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)


class ValidationError(EmberError):
    """Data violates a domain invariant (duplicates, non-finite values, ...)."""


class ConfigurationError(EmberError):
    """Invalid or inconsistent run configuration."""


class OutOfDomainError(EmberError):
    """Location lies outside a raster grid."""


class MissingValueError(EmberError):
    """A required value is nodata / missing."""


class SingularSystemError(EmberError):
    """A covariance system could not be factorized even with maximal jitter."""


class DegenerateError(EmberError):
    """Statistical object is degenerate (zero spread, empty variogram, ...)."""
