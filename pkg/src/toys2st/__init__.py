"""Toy expressive speech-to-speech translation: data pipeline, packing, training and scoring."""

__version__ = "0.1.0"
