"""Backprop-free CNN training: each conv layer learns from its own patch-energy
goodness through a frozen random projection."""

__version__ = "0.1.0"
