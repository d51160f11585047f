"""Conditional diffusion vocoder with time-aware location-variable convolutions."""

__version__ = "0.1.0"
