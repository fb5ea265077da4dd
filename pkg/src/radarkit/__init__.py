"""Adversarial-example detection toolkit: autodiff, small CNNs, attacks, detector training, metrics."""

__version__ = "0.1.0"
