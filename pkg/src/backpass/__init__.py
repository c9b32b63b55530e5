"""Generative top-down model over CNN activations, with backward-pass inference."""

__version__ = "0.1.0"
