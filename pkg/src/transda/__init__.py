"""Desk-scale domain-adaptive segmentation with momentum-smoothed self-training."""

__version__ = "0.1.0"
