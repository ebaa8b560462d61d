"""Datasets, checkpoints, accuracy-vs-speed-up curves, pipeline orchestration and the CLI."""
