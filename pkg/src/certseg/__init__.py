"""Certainty-masked semi-supervised segmentation with a misclassification-
detection evaluation suite, on a small numpy autodiff engine."""

__version__ = "0.1.0"
