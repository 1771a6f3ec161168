"""Offline imitation learning with counterfactual data augmentation, at toy scale."""

__version__ = "0.1.0"
