"""Report export: evaluation JSON and per-variant CSV tables."""
