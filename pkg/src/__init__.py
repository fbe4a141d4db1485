"""
TensorFact - Low-rank factorized convolutions for cross-modal transfer
"""

__version__ = "1.0.0"
