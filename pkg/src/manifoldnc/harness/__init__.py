"""Experiment orchestration: configs, datasets, runners, and the CLI."""
