"""Encoder-free point-cloud language modeling at desk scale."""

__version__ = "0.1.0"
