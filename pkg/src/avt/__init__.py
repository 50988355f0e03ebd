"""Verifiable training with multiple robustness criteria assigned by class similarity."""

__version__ = "0.1.0"
