"""Float64 tensors with tape-based reverse mode and replayed forward mode."""

from . import ops
from .numeric import finite_difference_gradient, relative_error
from .tensor import (
    Graph,
    GraphError,
    Node,
    ShapeError,
    Tensor,
    UnsupportedOpError,
    as_tensor,
    backward,
    jvp,
    jvp_fn,
)

__all__ = [
    "Graph",
    "GraphError",
    "Node",
    "ShapeError",
    "Tensor",
    "UnsupportedOpError",
    "as_tensor",
    "backward",
    "finite_difference_gradient",
    "jvp",
    "jvp_fn",
    "ops",
    "relative_error",
]
