"""Hierarchical multi-agent control of mechanically steered mmWave reflectors."""

__version__ = "0.1.0"
