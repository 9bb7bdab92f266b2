"""Learned latency prediction for parallel, dynamically modified query pipelines."""
__version__ = "0.1.0"
