"""Transformer-based single-object tracker with corner heads and a score-gated dynamic template."""

__version__ = "0.1.0"
