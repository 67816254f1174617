"""Reward-learning fine-tuning from demonstrations at desk scale."""

__version__ = "0.1.0"
