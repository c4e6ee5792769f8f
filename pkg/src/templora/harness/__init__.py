"""Command-line tools and desk-scale benchmark sweeps."""
