"""Numerical laboratory for exponential sums, partition averages and tube incidences."""

__version__ = "0.1.0"
