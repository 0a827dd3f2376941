"""Mask-invariant face embeddings via margin softmax plus embedding distillation."""
__version__ = "0.1.0"
