"""Self-consistent gradient-explanation tuning for a miniature VLM."""

__version__ = "0.1.0"
