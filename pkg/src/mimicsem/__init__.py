"""MIMIC structural-equation estimation with 2SLS and error-correction extensions."""

__version__ = "0.1.0"
