"""Mixed-precision post-training quantization of a small vision transformer."""

__version__ = "0.1.0"
