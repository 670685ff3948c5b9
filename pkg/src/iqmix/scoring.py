"""Predicted quality scores from level-token logits.

The closed-set softmax over the rating-level logits gives per-level
probabilities; the predicted score is the probability-weighted average of
the integer level scores, so a five-level scorer emits values in [1, 5].
The two-level variant reduces to a sigmoid of the logit difference.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import DataError, MalformedLogitsError
from .levels import FIVE_LEVEL_LABELS, LevelScale


@dataclass(frozen=True)
class LevelLogits:
    """Raw (unnormalized) logits for one item, ordered bad..excellent."""

    item_id: str
    values: tuple[float, ...]
    labels: tuple[str, ...] = FIVE_LEVEL_LABELS

    def __post_init__(self) -> None:
        if len(self.values) != len(self.labels):
            raise MalformedLogitsError(
                f"{self.item_id}: expected {len(self.labels)} logits, "
                f"got {len(self.values)}"
            )


@dataclass(frozen=True)
class LevelProbabilities:
    """Closed-set softmax output; entries sum to 1 within 1e-9."""

    values: tuple[float, ...]
    labels: tuple[str, ...] = FIVE_LEVEL_LABELS


@dataclass(frozen=True)
class PredictedScore:
    item_id: str
    score: float


def _check_finite(values: Sequence[float], labels: Sequence[str], item: str) -> None:
    for label, v in zip(labels, values):
        if not math.isfinite(v):
            raise MalformedLogitsError(f"{item}: non-finite logit for level {label!r}")


def softmax_vector(values: Sequence[float]) -> tuple[float, ...]:
    """Max-shifted softmax; equal to the plain softmax in exact arithmetic."""
    arr = np.asarray(values, dtype=np.float64)
    shifted = np.exp(arr - arr.max())
    probs = shifted / shifted.sum()
    return tuple(float(p) for p in probs)


def softmax_levels(logits: LevelLogits) -> LevelProbabilities:
    """Closed-set softmax over the level-token logits of one item."""
    _check_finite(logits.values, logits.labels, logits.item_id)
    return LevelProbabilities(softmax_vector(logits.values), logits.labels)


def weighted_score(probabilities: Sequence[float]) -> float:
    """Probability-weighted average of the integer level scores 1..n."""
    return float(sum(p * (i + 1) for i, p in enumerate(probabilities)))


def score_from_logit_vector(values: Sequence[float]) -> float:
    """Predicted score for an ordered logit vector of any level count >= 2."""
    if len(values) < 2:
        raise MalformedLogitsError("need at least two level logits")
    _check_finite(values, [f"level{i+1}" for i in range(len(values))], "<vector>")
    return weighted_score(softmax_vector(values))


def score_from_logits(logits: LevelLogits) -> PredictedScore:
    """Predicted score in [1, level count] for one item."""
    probs = softmax_levels(logits)
    return PredictedScore(logits.item_id, weighted_score(probs.values))


def binary_score(x_good: float, x_poor: float) -> float:
    """Two-level softmax score: sigmoid(x_good - x_poor), in (0, 1)."""
    if not math.isfinite(x_good) or not math.isfinite(x_poor):
        raise MalformedLogitsError(
            f"non-finite binary logits good={x_good!r} poor={x_poor!r}"
        )
    d = x_good - x_poor
    # Evaluate the stable branch so large |d| cannot overflow.
    if d >= 0:
        return 1.0 / (1.0 + math.exp(-d))
    e = math.exp(d)
    return e / (1.0 + e)


def rescale_score(score: float, scale: LevelScale) -> float:
    """Affine map from the native [1, n] scale onto [min, max] of a dataset."""
    n = scale.level_count
    return scale.min_score + (score - 1.0) * (scale.max_score - scale.min_score) / (n - 1)


@dataclass(frozen=True)
class BatchDiagnostic:
    """A malformed input record, reported with its 1-based line number."""

    line_no: int
    message: str


def _parse_five_level(obj: dict, line_no: int) -> LevelLogits:
    item_id = obj.get("id")
    if not isinstance(item_id, str):
        raise MalformedLogitsError(f"line {line_no}: missing or non-string 'id'")
    logits = obj.get("logits")
    if not isinstance(logits, dict):
        raise MalformedLogitsError(f"{item_id}: missing 'logits' object")
    values = []
    for label in FIVE_LEVEL_LABELS:
        if label not in logits:
            raise MalformedLogitsError(f"{item_id}: missing logit for level {label!r}")
        v = logits[label]
        if not isinstance(v, (int, float)) or isinstance(v, bool):
            raise MalformedLogitsError(f"{item_id}: non-numeric logit for {label!r}")
        values.append(float(v))
    return LevelLogits(item_id, tuple(values))


def _parse_binary(obj: dict, line_no: int) -> tuple[str, float, float]:
    item_id = obj.get("id")
    if not isinstance(item_id, str):
        raise MalformedLogitsError(f"line {line_no}: missing or non-string 'id'")
    pair = []
    for key in ("good", "poor"):
        v = obj.get(key)
        if not isinstance(v, (int, float)) or isinstance(v, bool):
            raise MalformedLogitsError(f"{item_id}: missing or non-numeric {key!r} logit")
        pair.append(float(v))
    return item_id, pair[0], pair[1]


def score_batch(
    lines: Iterable[str],
    *,
    binary: bool = False,
    strict: bool = False,
) -> Iterator[PredictedScore | BatchDiagnostic]:
    """Score a stream of line-delimited logit records, preserving order.

    Malformed records become BatchDiagnostic entries (with line numbers) in
    lenient mode; in strict mode the first malformed record raises.
    """
    for line_no, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line:
            continue
        try:
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise MalformedLogitsError(f"line {line_no}: invalid JSON ({exc})")
            if not isinstance(obj, dict):
                raise MalformedLogitsError(f"line {line_no}: record is not an object")
            if binary:
                item_id, x_good, x_poor = _parse_binary(obj, line_no)
                yield PredictedScore(item_id, binary_score(x_good, x_poor))
            else:
                yield score_from_logits(_parse_five_level(obj, line_no))
        except DataError as exc:
            if strict:
                raise
            yield BatchDiagnostic(line_no, str(exc))
