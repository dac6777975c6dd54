"""Domain-adversarial chronological age prediction from bulk RNA-seq counts."""

__version__ = "0.1.0"
