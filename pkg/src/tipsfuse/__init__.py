"""Optimal-transport multimodal fusion for post-TIPS prognosis, in numpy."""

__version__ = "0.1.0"
