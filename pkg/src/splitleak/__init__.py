"""Split-learning fine-tuning simulator and bidirectional data-reconstruction attacks."""

__version__ = "0.1.0"
