"""Spectral-spatial graph operator toolkit for sparse-to-dense field reconstruction."""

__version__ = "0.1.0"
