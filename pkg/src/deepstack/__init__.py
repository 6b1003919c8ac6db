"""Depth-stability laboratory for residual LayerNorm variants in toy transformers."""

__version__ = "0.1.0"
