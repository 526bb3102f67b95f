"""Sparse-view cone-beam CT reconstruction with axes-swapping 2.5D networks."""

__version__ = "0.1.0"
