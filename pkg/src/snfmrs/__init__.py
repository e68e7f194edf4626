"""Amortized flow-based posteriors for simulated MR spectra, with a least-squares comparator."""

__version__ = "0.1.0"
