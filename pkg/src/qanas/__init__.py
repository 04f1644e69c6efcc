"""Quantization-aware architecture search with mixed-precision weights."""

__version__ = "0.1.0"
