"""Vortex-particle simulation of 2D Euler in vorticity form, with verification tools."""

__version__ = "0.1.0"
