"""Multi-source land-cover segmentation with Minimum Class Confusion transfer."""

__version__ = "0.1.0"
