"""Desk-scale diffusion generator with iterative like/dislike feedback."""

__version__ = "0.1.0"
