"""Cooperative contrastive learning of multi-view video representations."""

__version__ = "0.1.0"
