"""Emotion-aware speaker anonymization with factorized distillation."""

__version__ = "0.1.0"
