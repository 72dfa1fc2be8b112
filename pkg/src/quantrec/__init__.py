"""Generative recommendation over quantized multimodal item identifiers.

Submodules: data, rqvae, quantlang, corpus, seq2seq, generate, evaluate,
pipeline, config and cli.
"""
__version__ = "0.1.0"
