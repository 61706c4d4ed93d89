"""Desk-scale laboratory for visual backdoor attacks and a patch-augmentation,
cross-view regularized defense objective on a synthetic captioning task."""

__version__ = "0.1.0"
