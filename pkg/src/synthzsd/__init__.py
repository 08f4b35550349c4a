"""Generative zero-shot detection on a synthetic proposal world."""

__version__ = "0.1.0"
