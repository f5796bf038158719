"""Effective-context measurement for frame-level sequence encoders."""

__version__ = "0.1.0"
