"""Experiment recipes built on the core engine."""
