"""Adversarial attacks and augmentation-based defenses for time series classifiers."""

__version__ = "0.1.0"
