"""Masked conditional diffusion for skeleton sequences."""
from .estimator import MacDiff, SkeletonScaler
from .evaluation import LinearProbeClassifier

__version__ = "0.1.0"

__all__ = ["MacDiff", "SkeletonScaler", "LinearProbeClassifier"]
