"""Wildfire mask prediction, cirrus segmentation and band-sensitivity tooling."""

__version__ = "0.1.0"
