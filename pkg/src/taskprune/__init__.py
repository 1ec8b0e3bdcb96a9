"""Task-specific neuron attribution and structured pruning for small encoder-decoder models."""

__version__ = "0.1.0"
