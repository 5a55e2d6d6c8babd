"""4D occupancy scene tokenizer and trajectory-conditioned latent diffusion."""

__version__ = "0.1.0"
