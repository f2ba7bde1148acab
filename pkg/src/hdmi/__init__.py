"""Logit-margin hidden-state interventions for a tiny word-level transformer."""

__version__ = "0.1.0"
