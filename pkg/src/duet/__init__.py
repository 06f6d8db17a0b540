"""Dual-tower zero-shot learner with cross-modal semantic grounding, at desk scale."""

__version__ = "0.1.0"
