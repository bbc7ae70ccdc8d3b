"""Mask-informed self-attention fusion editing on a toy latent diffusion model."""

__version__ = "0.1.0"
