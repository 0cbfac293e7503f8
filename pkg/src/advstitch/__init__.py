"""Adversarial attacks and adaptive adversarial training for learned image stitching."""

__version__ = "0.1.0"
