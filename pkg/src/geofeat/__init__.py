"""Geometry-constrained local descriptor learning toolkit."""

__version__ = "0.1.0"
