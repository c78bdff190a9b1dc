"""CLI module for the capsconv package."""
