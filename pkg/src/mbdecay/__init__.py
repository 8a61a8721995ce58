"""Numerical laboratory for Morse-Bott gradient flows and Floer cylinders."""

__version__ = "0.1.0"
