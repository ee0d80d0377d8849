"""Dual-branch latent diffusion inpainting at desk scale."""

__version__ = "0.1.0"
