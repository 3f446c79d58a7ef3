"""Batch front door: config-driven subcommands, JSON reports, SVG plots."""
