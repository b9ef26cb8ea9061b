"""Multi-grained mixture-of-experts for tri-modal (RGB/NIR/TIR) object re-identification."""

__version__ = "0.1.0"
