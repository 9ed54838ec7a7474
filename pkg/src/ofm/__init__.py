"""Operator flow matching: learned priors over functions and functional regression."""

__version__ = "0.1.0"
