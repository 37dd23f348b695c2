"""Exception hierarchy shared by every hetlab module."""


class HetlabError(Exception):
    """Base class for all library errors."""


class StructuralError(HetlabError, ValueError):
    """Shapes, lengths or identifiers do not line up."""


class CapacityError(HetlabError, ValueError):
    """A container holds fewer items than the caller asked for."""


class StateError(HetlabError, RuntimeError):
    """An object is used before it is ready (e.g. backward without forward)."""


class NumericError(HetlabError, FloatingPointError):
    """A NaN or infinity showed up where a finite value is required."""
