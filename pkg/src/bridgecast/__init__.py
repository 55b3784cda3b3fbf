"""Idealized turbulence/moisture data generation and diffusion-bridge downscaling."""

__version__ = "0.1.0"
