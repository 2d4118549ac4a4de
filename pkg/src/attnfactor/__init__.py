"""Attention-weighted factor models and a mixed-frequency transformer encoder."""

__version__ = "0.1.0"
