"""Attention U-Net segmentation toolkit for anisotropic FLAIR-like volumes."""

__version__ = "0.1.0"
