"""Sparse key-pixel adversarial patches against object detectors."""

__version__ = "0.1.0"
