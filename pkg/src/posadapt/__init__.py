"""Data-driven adaptive optimal control for positive linear systems."""
