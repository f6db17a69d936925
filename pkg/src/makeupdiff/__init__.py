"""Identity/makeup disentangled diffusion transfer at desk scale."""

__version__ = "0.1.0"
