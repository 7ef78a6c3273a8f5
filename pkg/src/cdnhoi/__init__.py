"""Cascade disentangling HOI detection on synthetic scenes."""

__version__ = "0.1.0"
