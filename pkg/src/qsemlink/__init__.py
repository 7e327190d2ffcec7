"""Quantized conditional diffusion over a simulated noisy semantic link."""

__version__ = "0.1.0"
