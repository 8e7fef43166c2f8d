"""Distributed pixel-lensing imaging pipeline."""

__version__ = "0.1.0"
