"""Continual object detection with replay and non-local distillation."""

__version__ = "0.1.0"
