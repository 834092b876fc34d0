"""Internalize documents into LoRA adapters generated by a context-to-adapter hypernetwork."""

__version__ = "1.0.0"
