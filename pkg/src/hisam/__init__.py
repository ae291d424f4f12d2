"""Semantic-ID recommendation: a disentangled multi-modal tokenizer feeding a
hierarchical memory-anchor transformer, with an anchor-evicting serving path."""

__version__ = "0.1.0"
