"""Parallel neural text-to-speech: features, corpus, model, vocoder, training and evaluation."""

__version__ = "0.1.0"
