"""Counterfactual-faithful quantization of small tabular classifiers."""

__version__ = "0.1.0"
