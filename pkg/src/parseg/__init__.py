"""Two-stage mutual learning for multi-organ segmentation from partially labeled datasets."""

__version__ = "0.1.0"
