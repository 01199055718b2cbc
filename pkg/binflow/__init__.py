"""Aligned flow matching on continuous and binary manifolds."""

__version__ = "1.0.0"
