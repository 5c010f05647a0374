"""Cycle-consistent single-step diffusion for inverse and forward rendering at desk scale."""

__version__ = "0.1.0"
