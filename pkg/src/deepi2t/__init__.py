"""Travel-time estimation from grid sequences and layout images."""

__version__ = "0.1.0"
