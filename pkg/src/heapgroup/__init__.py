"""Grouping head with contrastive losses for unsupervised object discovery."""

__version__ = "0.1.0"
