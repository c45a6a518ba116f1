"""Discrete varifolds, elliptic comparison solves, and second-order jets."""

__version__ = "0.1.0"
