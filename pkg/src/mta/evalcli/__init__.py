"""Corpus handling, synthetic data, metrics, experiment drivers and the CLI."""
