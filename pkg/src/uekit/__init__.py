"""Toolkit for crafting and evaluating unlearnable examples against pretrained victims."""

__version__ = "0.1.0"
