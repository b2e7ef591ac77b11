"""Conditioned 1D CNN tool-wear estimation benchmark on a synthetic milling campaign."""

__version__ = "0.1.0"
