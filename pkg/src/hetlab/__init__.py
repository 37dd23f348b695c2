"""Heterogeneity quantification and dynamic parameter sharing for particle MARL."""

from hetlab.errors import (
    CapacityError,
    HetlabError,
    NumericError,
    StateError,
    StructuralError,
)

__version__ = "0.1.0"

__all__ = [
    "CapacityError",
    "HetlabError",
    "NumericError",
    "StateError",
    "StructuralError",
    "__version__",
]
