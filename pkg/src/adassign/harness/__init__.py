"""Command-line harness: scenarios, experiment drivers and output files."""
