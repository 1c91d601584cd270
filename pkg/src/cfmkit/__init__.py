"""Competitive fragmentation modeling of ESI-MS/MS spectra."""

__version__ = "0.1.0"
