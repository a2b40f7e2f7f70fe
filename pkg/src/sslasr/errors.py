class SslAsrError(Exception):
    """Base class for errors raised by this package."""


class ConfigError(SslAsrError, ValueError):
    """Invalid or inconsistent configuration."""


class FormatError(SslAsrError, ValueError):
    """Malformed file contents."""


class UnsupportedError(FormatError):
    """Well-formed file using an encoding this package does not handle."""


class SchemaError(FormatError):
    """A structured record is missing fields or has the wrong types."""
