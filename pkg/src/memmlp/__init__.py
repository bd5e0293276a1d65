"""Mem-MLP: full-body motion from head and hand tracking."""

__version__ = "0.1.0"
