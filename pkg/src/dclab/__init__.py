"""Numerical laboratory for steady Baldwin-Lomax type degenerate curl-curl systems."""

__version__ = "0.1.0"
