"""Run configuration and the experiment subcommands built on it."""
