"""Cascaded convolutional text network: coarse-to-fine scene text localization."""
__version__ = "0.1.0"
