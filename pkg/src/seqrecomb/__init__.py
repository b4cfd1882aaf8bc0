"""Prototype-recombination data augmentation for compositional sequence tasks."""

__version__ = "0.1.0"
