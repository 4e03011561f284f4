"""Generative recommendation with unified item codes."""

__version__ = "0.1.0"
