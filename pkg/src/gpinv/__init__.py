"""Generative pseudoinverse super-resolution: a degradation flow plus a kernel-space DDPM."""

__version__ = "0.1.0"
