"""Cross-model knowledge distillation between CNN and Transformer audio classifiers."""

__version__ = "0.1.0"
