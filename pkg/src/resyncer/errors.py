"""Exception hierarchy shared across the package.

Exit-code mapping used by the CLI: ConfigError -> 2, DataError (and its
subclasses) -> 3, NumericError -> 4.
"""


class ResyncerError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(ResyncerError):
    """Invalid or inconsistent configuration."""


class DataError(ResyncerError):
    """Bad data: I/O failures, malformed corpora, missing inputs."""


class DomainError(DataError):
    """Arguments outside an operation's domain (shape/range violations)."""


class GeometryError(DomainError):
    """Degenerate geometry: singular poses, invalid projections."""


class NumericError(ResyncerError):
    """Numeric guard tripped: zero-norm embeddings, undefined statistics."""
