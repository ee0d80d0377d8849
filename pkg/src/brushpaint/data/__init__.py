"""Synthetic corpus, annotation pipeline and batch assembly."""
