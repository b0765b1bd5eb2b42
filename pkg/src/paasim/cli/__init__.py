"""Command-line surface: configuration files, deployments, experiments."""
