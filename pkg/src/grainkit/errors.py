"""Exception taxonomy shared across the toolkit.

Each CLI-facing error family carries the process exit code the command
surface maps it to (0 success, 2 invalid config/flags, 3 io, 4 backend,
5 data mismatch).
"""

from __future__ import annotations


class GrainkitError(Exception):
    exit_code = 1


class InvalidConfigError(GrainkitError):
    exit_code = 2


class IoError(GrainkitError):
    exit_code = 3


class BackendUnavailableError(GrainkitError):
    exit_code = 4


class DataMismatchError(GrainkitError):
    exit_code = 5


class DimensionMismatchError(DataMismatchError):
    """Two grids that must share a shape do not."""


class MalformedRleError(DataMismatchError):
    """Run-length counts that violate the codec contract."""


class GapInIdsError(DataMismatchError):
    """Label map whose grain ids are not a contiguous 1..K set."""


class EmptyMaskError(DataMismatchError):
    """An operation that needs at least one foreground pixel got none."""


class GrainSetMismatchError(DataMismatchError):
    """Two per-grain result sets that must cover the same grains do not."""


class InvalidPromptError(GrainkitError):
    exit_code = 5


class CacheCorruptError(DataMismatchError):
    """Replay cache entry whose content digest does not match."""


class CannotPlaceError(GrainkitError):
    """Center sampling could not satisfy the minimum separation."""

    exit_code = 2
