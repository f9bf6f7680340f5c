"""Consensus message passing for layered factor graphs."""

__version__ = "0.1.0"
