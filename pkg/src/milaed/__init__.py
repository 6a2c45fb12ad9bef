"""Small-footprint multiple instance learning for weakly labeled audio event tagging."""

__version__ = "0.1.0"
