"""Dual-attention post popularity classifier with LDA user environments and corpus analyses."""

__version__ = "0.1.0"
