"""Polarized spiral PSF toolkit: mask design, line CRLBs, imaging simulation and 3D reconstruction."""

__version__ = "0.1.0"
