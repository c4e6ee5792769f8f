"""Temporary low-rank adapters for long-text generation."""
