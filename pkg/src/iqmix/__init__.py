"""Image-quality rating-level conversions, level-logit scoring, IQA
evaluation metrics, and a two-stage training data-mixture optimizer with
loss-ratio feedback control."""

__version__ = "0.1.0"

from .levels import (
    FIVE_LEVEL_LABELS,
    FrequencyVector,
    LevelScale,
    RatingLevel,
    level_to_score,
    mos_from_frequencies,
    score_to_level,
)
from .scoring import (
    LevelLogits,
    LevelProbabilities,
    PredictedScore,
    binary_score,
    score_from_logits,
    softmax_levels,
)
from .metrics import PairedSample, avg_metric, conversion_precision, plcc, srcc

__all__ = [
    "__version__",
    "FIVE_LEVEL_LABELS",
    "FrequencyVector",
    "LevelScale",
    "RatingLevel",
    "level_to_score",
    "mos_from_frequencies",
    "score_to_level",
    "LevelLogits",
    "LevelProbabilities",
    "PredictedScore",
    "binary_score",
    "score_from_logits",
    "softmax_levels",
    "PairedSample",
    "avg_metric",
    "conversion_precision",
    "plcc",
    "srcc",
]
