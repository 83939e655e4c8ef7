"""Adversarial camouflage toolkit: differentiable texture attacks on toy detectors."""

__version__ = "0.1.0"
