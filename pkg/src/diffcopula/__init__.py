"""Diffusion-copula probabilistic forecasting: mixture-density marginals joined
by a classification-diffusion copula."""

__version__ = "0.1.0"
