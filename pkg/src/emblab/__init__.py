"""Toy lab for cross-modal embedding geometry, contrastive refinement, and
generalization-bound experiments."""

__version__ = "0.1.0"
