"""Tracking by natural-language specification at desk scale."""
