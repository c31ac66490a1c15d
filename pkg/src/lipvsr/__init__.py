"""Cross-speaker lip reading with landmark tubelets, a conformer back-end and MI regularization."""

__version__ = "0.1.0"
