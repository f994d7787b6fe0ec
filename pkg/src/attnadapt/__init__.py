"""Attention-guided test-time prompt adaptation, self-contained at desk scale."""

__version__ = "0.1.0"
