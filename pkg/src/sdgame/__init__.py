"""Numerical engine for two-player stochastic differential games with
Poisson regime switching and coupled nonlinear cost systems."""

__version__ = "0.1.0"
