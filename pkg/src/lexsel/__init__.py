"""Verb-frame acceptability and frequency modelling toolkit."""

__version__ = "0.1.0"
