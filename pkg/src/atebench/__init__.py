"""Realistic simulation benchmarking of average-treatment-effect estimators."""

__version__ = "0.1.0"
