"""Nonparametric estimation of a spatially varying diffusivity from noisy observations
of a stochastic heat equation."""

__version__ = "0.1.0"
