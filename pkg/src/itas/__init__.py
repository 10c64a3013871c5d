"""Incremental temporal action segmentation with generative replay."""

__version__ = "0.1.0"
