"""Exception types shared across the toolkit.

Every error raised on a contract violation derives from ``VQDError`` so the
CLI can map failures to a single machine-parsable line and a nonzero exit.
"""


class VQDError(Exception):
    """Base class for all toolkit errors."""


class ShapeMismatchError(VQDError):
    """Tensor or image shapes violate an operation's contract."""


class ConfigError(VQDError):
    """Invalid, unknown, or inconsistent configuration values."""


class StageTagError(VQDError):
    """A checkpoint's stage tag does not match what the caller requires."""


class IntegrityError(VQDError):
    """A checkpoint archive is corrupt, truncated, or version-incompatible."""


class ManifestError(VQDError):
    """A clip manifest is malformed, or references missing/mixed-size frames."""


class CompressBackendError(VQDError):
    """The requested compression backend is unavailable in this environment."""
