"""Gambling adversarial networks for structured semantic segmentation.

A segmenter and a budget-constrained gambler play a minimax game: the
gambler bets on pixels it believes are misclassified, the segmenter learns
to leave no structural clues. Includes the conventional adversarial,
embedding-loss, focal and cross-entropy baselines, structural metrics
(BF-score, modified Hausdorff, mean IoU), a synthetic benchmark and a CLI.
"""

from .errors import (
    ConfigError,
    DataError,
    DegenerateInputError,
    NotNormalizedError,
    NumericalAbort,
    SegbetError,
    ShapeMismatchError,
)

__all__ = [
    "ConfigError",
    "DataError",
    "DegenerateInputError",
    "NotNormalizedError",
    "NumericalAbort",
    "SegbetError",
    "ShapeMismatchError",
]

__version__ = "0.1.0"
