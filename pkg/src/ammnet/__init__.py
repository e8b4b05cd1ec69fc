"""Desk-scale semantic scene completion with cross-modal modulation and
adversarially regularized training."""

__version__ = "0.1.0"
