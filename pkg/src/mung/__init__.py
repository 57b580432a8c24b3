"""Positive-incentive noise fine-tuning on a toy frozen multimodal model."""

__version__ = "0.1.0"
