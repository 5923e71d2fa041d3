"""Scribble-supervised dual-teacher segmentation lab on synthetic cardiac phantoms."""

from .common import (IGNORE_LABEL, ConfigError, DataError, InputError,
                     NumericalError, SdtlabError)

__version__ = "0.1.0"

__all__ = [
    "IGNORE_LABEL",
    "SdtlabError",
    "ConfigError",
    "InputError",
    "DataError",
    "NumericalError",
    "__version__",
]
