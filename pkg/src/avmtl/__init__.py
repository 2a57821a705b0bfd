"""Audio-visual multi-task recognition of facial action units and expressions."""

__version__ = "0.1.0"
