"""Soft cross-city correspondence via entropic optimal transport."""

__version__ = "0.1.0"
