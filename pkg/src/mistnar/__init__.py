"""Encoder-only non-autoregressive generation with mixed source / pseudo-target training."""
