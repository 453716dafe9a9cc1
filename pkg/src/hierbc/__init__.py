"""Hierarchical task-conditioned object-centric representations and
behavior-cloned manipulation policies on a synthetic desk-scale benchmark."""

__version__ = "0.1.0"
