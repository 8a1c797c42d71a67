"""Two-stage (post-training + knowledge-aware fine-tuning) training for
knowledge-graph-augmented multiple-choice QA, at desk scale."""

__version__ = "0.1.0"
