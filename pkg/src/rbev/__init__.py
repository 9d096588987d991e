"""Relation-aware multi-camera bird's-eye-view fusion for roadside perception."""

__version__ = "0.1.0"
