"""Gradient-based maximum likelihood for GMM, GMCM and MFA models."""
__version__ = "0.1.0"
