"""Exception types shared across the package.

Exit-code mapping for the CLI: ConfigError / InvalidInputError /
MissingArtifactError are user errors (exit 1); everything else derived
from DismobError is a runtime failure (exit 2).
"""


class DismobError(Exception):
    """Base class for all package errors."""


class InvalidInputError(DismobError):
    """Input data violates a documented precondition."""


class ConfigError(DismobError):
    """Configuration value violates an invariant; message names the field path."""


class InsufficientDataError(DismobError):
    """Not enough data to perform the requested computation."""


class NumericError(DismobError):
    """A non-finite value appeared where finiteness is guaranteed."""


class IntegrityError(DismobError):
    """A persisted artifact is corrupt or truncated."""


class VersionError(DismobError):
    """A persisted artifact was written by an incompatible format version."""


class MissingArtifactError(DismobError):
    """A required artifact file does not exist."""
