"""Multi-track symbolic music generation with absorbing-state discrete diffusion."""

__version__ = "0.1.0"
