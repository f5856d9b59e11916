"""Hardware-in-the-loop sensor hallucination from Gaussian-splat scenes."""
__version__ = "0.1.0"
