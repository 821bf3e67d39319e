"""Genetic neuron programming for U-shaped vessel segmentation networks."""

__version__ = "0.1.0"
