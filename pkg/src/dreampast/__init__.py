"""Diffusion generative replay for class-incremental semantic segmentation, at desk scale."""

__version__ = "0.1.0"
