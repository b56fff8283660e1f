"""Knowledge-augmented attention captioning on precomputed region features."""

__version__ = "0.1.0"
