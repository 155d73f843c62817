"""Lightweight depthwise-separable CNN toolkit for two-stage fish classification."""

__version__ = "0.1.0"
