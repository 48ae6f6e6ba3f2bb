"""Guided diffusion denoising of low-count dynamic cardiac PET, with synthetic
phantoms, one-tissue kinetic fitting and image-quality metrics."""

__version__ = "0.1.0"
