"""Interpretable prototype network for mass-margin classification with a malignancy head, built on numpy."""

__version__ = "0.1.0"
