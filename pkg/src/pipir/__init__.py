"""Prompt-in-prompt learning for universal image restoration, at desk scale."""

__version__ = "0.1.0"
