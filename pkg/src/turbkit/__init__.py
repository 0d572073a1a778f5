"""Stochastically forced pseudo-spectral Navier-Stokes with local KHM diagnostics."""

__version__ = "0.1.0"
