"""Statistical shape models of long bones and landmark-driven reconstruction."""
__version__ = "0.1.0"
