"""Steering the mean and covariance of input-delayed linear stochastic systems."""

__version__ = "0.1.0"
