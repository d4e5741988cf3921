"""Covariate injection adapters for token-quantized forecasters, with a synthetic benchmark."""

__version__ = "0.1.0"
