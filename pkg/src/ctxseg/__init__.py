"""Context-aware semantic segmentation at desk scale."""

__version__ = "0.1.0"
