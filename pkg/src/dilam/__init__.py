"""Domain-incremental adaptation of a frozen classifier through affine memory banks."""

__version__ = "0.1.0"
