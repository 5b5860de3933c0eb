"""Slice-to-atlas identification and mutual-information affine registration."""

from .imagekit import AffineTransform, ClaheConfig, GrayImage

__all__ = ["AffineTransform", "ClaheConfig", "GrayImage"]
__version__ = "0.1.0"
