"""Quatrain generation with a salient-clue context mechanism."""

__version__ = "0.1.0"
