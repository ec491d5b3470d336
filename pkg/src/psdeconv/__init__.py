"""Bayesian P-spline deconvolution of contrast-agent concentration curves."""

__version__ = "0.1.0"
