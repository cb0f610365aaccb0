"""Evaluation of Monte-Carlo Bayesian segmentation outputs for contour QA."""

__version__ = "0.1.0"
