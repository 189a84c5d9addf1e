"""Tiny latent-reasoning lab: a from-scratch transformer that interleaves
text tokens with continuous thinking tokens built by context-prediction
fusion, plus the training curriculum and analysis tooling around it."""

__version__ = "0.1.0"
