"""Functional generative networks for ensemble forecasting of a stochastic
Lorenz-96 ring, with the verification suite used to score them."""

__version__ = "0.1.0"
