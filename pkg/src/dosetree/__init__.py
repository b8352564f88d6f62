"""Bayesian regression trees with penalized-spline dose-response leaves."""

from dosetree.__version__ import __version__

__all__ = ["__version__"]
