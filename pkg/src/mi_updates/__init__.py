"""Membership inference against models that are updated with new data."""

__version__ = "0.1.0"
