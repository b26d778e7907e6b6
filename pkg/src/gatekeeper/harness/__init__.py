"""Experiment harness: configuration, the staged pipeline, reports, acceptance checks and the CLI."""
