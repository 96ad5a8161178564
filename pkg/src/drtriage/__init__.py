"""Ordinal diabetic-retinopathy grading: preprocessing, a small autodiff
engine, a MobileNetV3-style backbone with a CORAL head, training,
metrics and a compact model file format."""

__version__ = "0.1.0"
