"""Decoupled data-based control."""
