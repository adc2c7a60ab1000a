"""Sparse-from-scratch training and accelerator cost modelling."""

__version__ = "0.1.0"
