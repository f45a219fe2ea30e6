"""Dual-path teacher-student audio-visual representation learning on
pre-extracted feature vectors, with baselines and a class-based cross-modal
retrieval evaluation harness."""

__version__ = "0.1.0"
