"""Doubly stochastic functional gradients for kernel machines."""

__version__ = "0.1.0"
