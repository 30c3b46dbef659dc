"""Volumetric model debugging: Jacobian saliency maps and gradient-penalty training."""

__version__ = "0.1.0"
