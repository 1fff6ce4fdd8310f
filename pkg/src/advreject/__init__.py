"""Specialists+1 ensembles that reject adversarial examples by confidence."""

__version__ = "0.1.0"
