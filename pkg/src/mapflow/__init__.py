"""Peeling explorations, coalescing flows and geodesic trees of planar maps with large faces."""
__version__ = "0.1.0"
