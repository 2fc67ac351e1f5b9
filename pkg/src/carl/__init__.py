"""Compositional audio representation learning: slot-based audio models."""

__version__ = "0.1.0"
