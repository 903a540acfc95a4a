"""Semantic image transmission over simulated time-varying wireless channels."""

__version__ = "0.1.0"
