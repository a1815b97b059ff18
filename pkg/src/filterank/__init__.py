"""Conversion-oriented search filter recommendation."""

__version__ = "0.1.0"
