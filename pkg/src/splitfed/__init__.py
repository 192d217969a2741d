"""Federated split pre-training and fine-tuning of a small BERT for URL classification."""

__version__ = "0.1.0"
