"""Test package for splat-align."""
