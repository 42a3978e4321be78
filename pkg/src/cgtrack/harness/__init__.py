"""Configuration, checkpoints, synthetic data, training, tracking and the CLI."""
