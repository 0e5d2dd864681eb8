"""Structural sieve networks for production and discrete choice."""

__version__ = "0.1.0"

