"""Shared constants and exception types."""

# Label value marking unannotated pixels in scribble/pseudo-label maps.
# Stored in unsigned-byte maps, so class indices must stay below 255.
IGNORE_LABEL = 255


class SdtlabError(Exception):
    """Base class for all package errors."""


class ConfigError(SdtlabError):
    """Invalid configuration value or combination (user-fixable, usage-level)."""


class InputError(SdtlabError):
    """Malformed runtime input: shape mismatch, out-of-range label, fingerprint mismatch."""


class DataError(SdtlabError):
    """Dataset or checkpoint I/O problem: missing file, corrupt header, size mismatch."""


class NumericalError(SdtlabError):
    """Non-finite value where a finite one is required (loss components, teacher scores)."""
