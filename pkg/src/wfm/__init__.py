"""Wavelet-space flow matching for autoregressive emulation of gridded PDE states."""

__version__ = "0.1.0"
