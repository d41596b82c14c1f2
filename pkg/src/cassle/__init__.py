"""Continual self-supervised learning with predictor-mediated self-distillation, on numpy."""

__version__ = "0.1.0"
