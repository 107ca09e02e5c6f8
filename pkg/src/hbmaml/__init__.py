"""Gradient-based meta-learning as empirical Bayes in a hierarchical model."""

__version__ = "0.1.0"
