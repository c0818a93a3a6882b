"""Convolutional k-means dictionary learning with learned layer connections."""

__version__ = "0.1.0"
