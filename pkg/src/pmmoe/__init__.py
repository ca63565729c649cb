"""Desk-scale simulator for mixture-of-personal-modules federated fine-tuning."""

__version__ = "0.1.0"
