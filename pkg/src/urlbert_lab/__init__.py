"""Desk-scale URL encoder laboratory: tokenizer, differentiable transformer,
five self-supervised objectives with grouped two-stage pre-training, task
fine-tuning, and evaluation tooling."""

__version__ = "0.1.0"
