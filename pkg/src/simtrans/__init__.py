"""Weak-shot classification with transferred similarity on synthetic features."""

__version__ = "0.1.0"
