"""
OCT-A Quant - vessel segmentation and FAZ quantification for en-face OCT-A images.

This package provides a trainable patch-based CNN pixel classifier, Otsu binarization,
foveal avascular zone morphometry, segmentation agreement metrics and cohort statistics,
exposed through a batch CLI and a small background-job HTTP API.
"""

__version__ = "1.0.0"
