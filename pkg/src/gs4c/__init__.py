"""Compression of 4D Gaussian splatting scenes."""

__version__ = "0.1.0"
