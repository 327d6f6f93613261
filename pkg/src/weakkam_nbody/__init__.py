"""Numerical weak KAM toolkit for N-body problems with homogeneous potentials."""
__version__ = "0.1.0"
