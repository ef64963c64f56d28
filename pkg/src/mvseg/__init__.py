"""Multi-view promptable segmentation on pointmaps."""

__version__ = "0.1.0"
