"""trajscope: trajectory segmentation, multiview tokenization, and task evaluation."""

__version__ = "0.1.0"
