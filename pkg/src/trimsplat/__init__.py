"""Trajectory reduction and background token masking for a toy splat-grid diffusion model."""

__version__ = "0.1.0"
