"""Heterogeneous label graphs and label-matching decoders for multi-intent SLU."""

__version__ = "0.1.0"
