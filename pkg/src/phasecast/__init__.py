"""Local frequency-domain video prediction toolkit."""

__version__ = "0.1.0"
