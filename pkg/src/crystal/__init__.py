"""Anharmonic crystal lattice dynamics and its finite-volume verification lab."""

__version__ = "0.1.0"
