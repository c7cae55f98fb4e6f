"""Manifold- and cycle-consistent neural surrogates for a synthetic
multi-modal simulator: autodiff core, Wasserstein autoencoder, forward
surrogate, pseudo-inverse, evaluation suite, and CLI."""

__version__ = "0.1.0"
