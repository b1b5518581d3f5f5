"""Onsets-and-frames style transcription on a small numpy autodiff engine.

Pipeline: ``frontend`` (log-mel) -> ``models`` (acoustic stacks built from
``layers`` over ``autodiff``) -> ``decoder`` -> ``evaluator``; ``trainer``
fits models on corpora from ``dataio``.
"""

__version__ = "0.1.0"

from .errors import (  # noqa: E402
    DegenerateFilterbank,
    DivergedError,
    InvalidConfig,
    InvalidInput,
    InvalidLabel,
    OafkitError,
    ParseError,
    ShapeError,
    UnsupportedFormat,
)
from .kernels import BACKEND  # noqa: E402

__all__ = [
    "BACKEND",
    "DegenerateFilterbank",
    "DivergedError",
    "InvalidConfig",
    "InvalidInput",
    "InvalidLabel",
    "OafkitError",
    "ParseError",
    "ShapeError",
    "UnsupportedFormat",
    "__version__",
]
