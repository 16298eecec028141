"""Adversarial attacks, metrics and a smoothing defense for sequence-to-sequence ASR."""

__version__ = "0.1.0"
