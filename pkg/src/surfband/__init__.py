"""Learned closest-point extension for PDEs on surfaces."""
__version__ = "0.1.0"
