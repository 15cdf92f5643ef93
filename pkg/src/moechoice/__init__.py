"""Mixture-of-experts discrete choice estimation, benchmarking and analysis."""
__version__ = "0.1.0"
