"""Rating-level vocabulary and bidirectional score/level conversions.

A scale divides its score range [m, M] into equal-width intervals, one per
rating level. A score s maps to level i when
m + (i-1)/n * (M-m) < s <= m + i/n * (M-m); the lone leftover point s = m
is assigned to level 1 so the whole range is covered. Interior edges are
compared bit-exactly, with no epsilon adjustment. The reverse mapping sends
level i back to the integer score i, and a MOS is the frequency-weighted
average of those integers.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Literal

import numpy as np

from .errors import ConfigError, NormalizationError, ScoreOutOfRangeError

FIVE_LEVEL_LABELS = ("bad", "poor", "fair", "good", "excellent")
TWO_LEVEL_LABELS = ("poor", "good")


def _labels_for(count: int) -> tuple[str, ...]:
    if count == 5:
        return FIVE_LEVEL_LABELS
    if count == 2:
        return TWO_LEVEL_LABELS
    return tuple(f"level{i}" for i in range(1, count + 1))


@dataclass(frozen=True)
class RatingLevel:
    """One ordinal rating level; index is 1-based, low quality to high."""

    index: int
    label: str


@dataclass(frozen=True)
class LevelScale:
    """A score range [min_score, max_score] split into equal-width levels."""

    min_score: float
    max_score: float
    level_count: int = 5

    def __post_init__(self) -> None:
        if not (self.max_score > self.min_score):
            raise ConfigError(
                f"scale requires max_score > min_score, got "
                f"[{self.min_score}, {self.max_score}]"
            )
        if self.level_count < 2:
            raise ConfigError(f"level_count must be >= 2, got {self.level_count}")

    @property
    def labels(self) -> tuple[str, ...]:
        return _labels_for(self.level_count)

    @property
    def levels(self) -> tuple[RatingLevel, ...]:
        return tuple(
            RatingLevel(i + 1, label) for i, label in enumerate(self.labels)
        )

    def level(self, index: int) -> RatingLevel:
        if not 1 <= index <= self.level_count:
            raise ConfigError(f"level index {index} outside 1..{self.level_count}")
        return RatingLevel(index, self.labels[index - 1])

    def bin_edges(self) -> tuple[float, ...]:
        """All n+1 edges m + (k/n)(M-m), k = 0..n, strictly increasing."""
        m, big_m, n = self.min_score, self.max_score, self.level_count
        return tuple(m + (k / n) * (big_m - m) for k in range(n + 1))

    def interior_edges(self) -> tuple[float, ...]:
        return self.bin_edges()[1:-1]


def score_to_level(score: float, scale: LevelScale) -> RatingLevel:
    """Map a score to its rating level on the given scale.

    Interval i is (edge_{i-1}, edge_i], so scores on an interior edge belong
    to the lower interval; score == min maps to the first level.
    """
    if not (scale.min_score <= score <= scale.max_score) or not np.isfinite(score):
        raise ScoreOutOfRangeError(
            f"score {score!r} outside scale [{scale.min_score}, {scale.max_score}]"
        )
    index = 1
    for edge in scale.interior_edges():
        if score <= edge:
            break
        index += 1
    return scale.level(index)


def quantize_scores(scores: Iterable[float], scale: LevelScale) -> np.ndarray:
    """Vectorized score -> level-index conversion (same edge convention)."""
    arr = np.asarray(list(scores) if not isinstance(scores, np.ndarray) else scores,
                     dtype=np.float64)
    if arr.size and (arr.min() < scale.min_score or arr.max() > scale.max_score):
        bad = arr[(arr < scale.min_score) | (arr > scale.max_score)][0]
        raise ScoreOutOfRangeError(
            f"score {bad!r} outside scale [{scale.min_score}, {scale.max_score}]"
        )
    edges = np.asarray(scale.interior_edges(), dtype=np.float64)
    # side='left' counts edges strictly below s, so s on an edge stays in the
    # lower interval, matching score_to_level.
    return np.searchsorted(edges, arr, side="left").astype(np.int64) + 1


def level_to_score(level: RatingLevel) -> int:
    """Reverse mapping: level i becomes the integer score i."""
    return level.index


@dataclass(frozen=True)
class FrequencyVector:
    """Per-level frequencies, either normalized or raw counts.

    The form is explicit; nothing is inferred from the values.
    """

    values: tuple[float, ...]
    form: Literal["normalized", "counts"] = "normalized"

    def __post_init__(self) -> None:
        if len(self.values) != 5:
            raise NormalizationError(
                f"expected one frequency per rating level (5), got {len(self.values)}"
            )
        if any(v < 0 or not np.isfinite(v) for v in self.values):
            raise NormalizationError(
                f"frequencies must be finite and nonnegative, got {self.values}"
            )
        if self.form not in ("normalized", "counts"):
            raise NormalizationError(f"unknown frequency form {self.form!r}")

    @classmethod
    def from_counts(cls, counts: Iterable[float]) -> "FrequencyVector":
        return cls(tuple(float(c) for c in counts), form="counts")

    def as_normalized(self) -> "FrequencyVector":
        if self.form == "normalized":
            return self
        total = sum(self.values)
        if total <= 0:
            raise NormalizationError("cannot normalize an all-zero count vector")
        return FrequencyVector(tuple(v / total for v in self.values))


def mos_from_frequencies(freq: FrequencyVector) -> float:
    """MOS as the frequency-weighted average of the per-level scores i."""
    if freq.form != "normalized":
        raise NormalizationError(
            "mos_from_frequencies requires the normalized form; "
            "call as_normalized() on count vectors first"
        )
    total = sum(freq.values)
    if abs(total - 1.0) > 1e-9:
        raise NormalizationError(
            f"normalized frequencies must sum to 1 within 1e-9, got sum {total!r}"
        )
    return float(sum(f * (i + 1) for i, f in enumerate(freq.values)))
