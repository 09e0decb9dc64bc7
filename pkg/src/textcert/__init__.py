"""Certified robustness of small text classifiers against symbol substitutions."""

__version__ = "0.1.0"
