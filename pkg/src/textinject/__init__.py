"""Streaming cascaded-encoder transducer trained jointly on speech and unpaired text."""

__version__ = "0.1.0"
