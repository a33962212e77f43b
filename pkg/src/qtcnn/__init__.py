"""Quantum-Train CNN: QNN-generated weights for a small 1-D CNN audio classifier."""

__version__ = "0.1.0"
