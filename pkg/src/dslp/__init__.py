"""Non-autoregressive translation with deep supervision and layer-wise prediction feedback."""

__version__ = "0.1.0"
