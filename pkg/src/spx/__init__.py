"""Superpixel transformer for semantic segmentation, built on a small numpy autodiff."""

__version__ = "0.1.0"
