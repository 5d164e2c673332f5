"""Context-plus-task semantic image transmission over a shared VQ codec."""

__version__ = "0.1.0"
