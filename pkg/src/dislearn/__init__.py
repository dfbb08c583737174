"""Derivative-informed reduced-basis surrogates for 1D PDE operators."""

__version__ = "0.1.0"
