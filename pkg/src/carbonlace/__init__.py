"""Locational carbon emission metrics for DC-dispatched power grids."""

__version__ = "0.1.0"
