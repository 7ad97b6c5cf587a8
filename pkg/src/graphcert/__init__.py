"""Certified bounds, verification and optimization for computation graphs over boxes."""

__version__ = "0.1.0"
