"""Flood segmentation from RGB imagery with synthesized SWIR and self-supervised label refinement."""

__version__ = "0.1.0"
