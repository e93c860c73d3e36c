"""Forgetting training data in classifiers through proxy-model logit shifts."""

__version__ = "0.1.0"
