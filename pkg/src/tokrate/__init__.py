"""Desk-scale speech tokenizer laboratory: VQ-VAE bottleneck inside a
CTC/attention ASR model with configurable token frame rate, synthetic
tonal/non-tonal corpora, and the measurement harness around them."""

__version__ = "0.1.0"
