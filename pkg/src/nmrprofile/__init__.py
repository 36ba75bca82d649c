"""Automated profiling of 1D NMR spectra against a library of compound signatures."""

__version__ = "0.1.0"
