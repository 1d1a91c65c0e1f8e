"""Toy-scale multi-concept personalization: token-wise value adapters and
latent optimization for disentangled cross-attention."""

__version__ = "0.1.0"
