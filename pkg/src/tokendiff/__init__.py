"""Desk-scale contrastive discrete latent diffusion over token sequences."""

__version__ = "0.1.0"
