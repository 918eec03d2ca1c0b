"""Joint recall benchmark, sparse attention patterns, and expressiveness checks."""

from .errors import (
    InvalidConfigError,
    InvalidInputError,
    JointRecallError,
    ResourceError,
    TrainingDivergenceError,
)

__version__ = "0.1.0"

__all__ = [
    "InvalidConfigError",
    "InvalidInputError",
    "JointRecallError",
    "ResourceError",
    "TrainingDivergenceError",
    "__version__",
]
