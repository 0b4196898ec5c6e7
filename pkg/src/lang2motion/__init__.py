"""Hierarchical two-stream text-to-motion synthesis."""

__version__ = "0.1.0"
