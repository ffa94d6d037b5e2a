"""Spectral-Galerkin toolkit for twisted periodic orbits and Floer strips of coupled particle-field systems."""

__version__ = "0.1.0"
