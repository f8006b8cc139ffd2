"""Exception hierarchy.

Each family maps onto one CLI exit code (see :mod:`splatcher.cli`).
"""


class SplatError(Exception):
    """Base class for all errors raised by splatcher."""


class ConfigError(SplatError):
    """Invalid parameters, camera, colormap coverage or scene keys."""


class IngestError(SplatError):
    """Problems reading or writing files."""


class MissingFileError(IngestError):
    pass


class BadMagicError(IngestError):
    pass


class VersionError(IngestError):
    pass


class TruncatedError(IngestError):
    pass


class ParseError(IngestError):
    """A text input file failed to parse. ``lineno`` is 1-based."""

    def __init__(self, path, lineno, message):
        self.path = str(path)
        self.lineno = lineno
        super().__init__(f"{path}:{lineno}: {message}")


class InvariantError(SplatError):
    """An internal invariant was violated."""


class PoolError(InvariantError):
    """Allocator contract violation (double free, foreign block)."""
