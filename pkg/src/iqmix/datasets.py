"""MOS ingestion, distribution-balancing subsampling, instruction-pair
emission, pool loading, and deterministic mixture sampling.

Pools are tagged D1 (scoring question-answer pairs built from MOS data),
D2 (quality-interpreting instruction data), and D3 (general visual
instruction data). D2/D3 are opaque here: they are produced elsewhere and
only loaded, counted, and sampled.
"""

from __future__ import annotations

import csv
import json
import logging
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import DataError, ScoreOutOfRangeError
from .levels import LevelScale, score_to_level

log = logging.getLogger(__name__)

POOL_TAGS = ("D1", "D2", "D3")

SCORING_SYSTEM_PREFIX = "Assume you are an image quality evaluator"
D1_QUESTION = "<img> How would you rate the quality of the image."
D1_ANSWER_TEMPLATE = "The quality of the image is {label}."


@dataclass(frozen=True)
class MosRecord:
    image_id: str
    mos: float


@dataclass(frozen=True)
class PoolStats:
    size: int
    mean_mos: float
    std_mos: float


def pool_stats(records: Sequence[MosRecord]) -> PoolStats:
    values = np.asarray([r.mos for r in records], dtype=np.float64)
    return PoolStats(len(records), float(values.mean()), float(values.std()))


@dataclass(frozen=True)
class InstructionPair:
    """One question-answer training pair; extra_turns keeps any follow-up
    human/assistant exchanges so multi-turn records survive a round trip."""

    id: str
    image_ref: str
    system: str | None
    question: str
    answer: str
    pool: str
    extra_turns: tuple[tuple[str, str], ...] = ()

    def __post_init__(self) -> None:
        if self.pool not in POOL_TAGS:
            raise DataError(f"unknown pool tag {self.pool!r}")
        if self.pool == "D1" and self.system != SCORING_SYSTEM_PREFIX:
            raise DataError(
                f"{self.id}: D1 pairs must carry the scoring system prefix verbatim"
            )


def ingest_mos(
    path: str | Path,
    scale: LevelScale,
    *,
    delimiter: str = ",",
    strict: bool = True,
) -> tuple[list[MosRecord], PoolStats]:
    """Read a delimited MOS file (header with image_id and mos columns).

    Out-of-scale or unparsable rows raise in strict mode; in lenient mode
    they are skipped with a logged row-numbered warning.
    """
    records: list[MosRecord] = []
    with open(path, newline="", encoding="utf-8") as handle:
        reader = csv.reader(handle, delimiter=delimiter)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file, expected a header row")
        try:
            id_col = header.index("image_id")
            mos_col = header.index("mos")
        except ValueError:
            raise DataError(
                f"{path}: header must contain image_id and mos columns, got {header}"
            )
        for row_no, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            try:
                if len(row) <= max(id_col, mos_col):
                    raise DataError(f"{path}: row {row_no}: missing columns")
                mos = float(row[mos_col])
                if not (scale.min_score <= mos <= scale.max_score):
                    raise ScoreOutOfRangeError(
                        f"{path}: row {row_no}: mos {mos!r} outside "
                        f"[{scale.min_score}, {scale.max_score}]"
                    )
            except (ValueError, DataError) as exc:
                err = exc if isinstance(exc, DataError) else DataError(
                    f"{path}: row {row_no}: unparsable mos {row[mos_col]!r}"
                )
                if strict:
                    raise err
                log.warning("skipping row: %s", err)
                continue
            records.append(MosRecord(row[id_col], mos))
    if not records:
        raise DataError(f"{path}: no valid MOS records")
    return records, pool_stats(records)


def subsample_balanced(
    records: Sequence[MosRecord],
    target_size: int,
    bins: int = 10,
    seed: int = 0,
) -> list[MosRecord]:
    """Subsample toward a flat MOS histogram.

    The observed MOS range is split into equal-width bins; each non-empty bin
    gets an equal share of the target (capped at ceil(target/bins occupied)),
    capped bins are sampled uniformly without replacement, and any unmet
    quota is redistributed round-robin to bins that still have records.
    The result is a subsequence of the input.
    """
    if target_size > len(records):
        raise DataError(
            f"target_size {target_size} exceeds record count {len(records)}"
        )
    if bins < 2:
        raise DataError(f"bins must be >= 2, got {bins}")
    if target_size == len(records):
        return list(records)

    values = np.asarray([r.mos for r in records], dtype=np.float64)
    lo, hi = float(values.min()), float(values.max())
    width = (hi - lo) / bins
    edges = np.asarray([lo + width * k for k in range(1, bins)], dtype=np.float64)
    bin_of = np.searchsorted(edges, values, side="left")

    members: dict[int, list[int]] = {}
    for idx, b in enumerate(bin_of):
        members.setdefault(int(b), []).append(idx)
    occupied = sorted(members)

    base, rem = divmod(target_size, len(occupied))
    take = {
        b: min(base + (1 if i < rem else 0), len(members[b]))
        for i, b in enumerate(occupied)
    }
    deficit = target_size - sum(take.values())
    while deficit > 0:
        for b in occupied:
            if deficit == 0:
                break
            if take[b] < len(members[b]):
                take[b] += 1
                deficit -= 1

    rng = random.Random(seed)
    selected: list[int] = []
    for b in occupied:
        selected.extend(rng.sample(members[b], take[b]))
    selected.sort()
    return [records[i] for i in selected]


def emit_d1_pairs(records: Sequence[MosRecord], scale: LevelScale) -> list[InstructionPair]:
    """One scoring question-answer pair per MOS record, in record order."""
    pairs = []
    for rec in records:
        label = score_to_level(rec.mos, scale).label
        pairs.append(
            InstructionPair(
                id=rec.image_id,
                image_ref=rec.image_id,
                system=SCORING_SYSTEM_PREFIX,
                question=D1_QUESTION,
                answer=D1_ANSWER_TEMPLATE.format(label=label),
                pool="D1",
            )
        )
    return pairs


def pair_to_json(pair: InstructionPair, *, inline_system: bool = False) -> str:
    """Serialize one pair with a fixed key order (round-trip stable)."""
    question = pair.question
    obj: dict = {"id": pair.id, "image": pair.image_ref}
    if pair.system is not None:
        if inline_system:
            question = f"{pair.system}\n{question}"
        else:
            obj["system"] = pair.system
    conversations = [
        {"from": "human", "value": question},
        {"from": "gpt", "value": pair.answer},
    ]
    for human, assistant in pair.extra_turns:
        conversations.append({"from": "human", "value": human})
        conversations.append({"from": "gpt", "value": assistant})
    obj["conversations"] = conversations
    return json.dumps(obj, ensure_ascii=False)


def write_pairs(
    pairs: Iterable[InstructionPair],
    path: str | Path,
    *,
    inline_system: bool = False,
) -> int:
    count = 0
    with open(path, "w", encoding="utf-8") as handle:
        for pair in pairs:
            handle.write(pair_to_json(pair, inline_system=inline_system) + "\n")
            count += 1
    return count


def _pair_from_obj(obj: dict, pool_tag: str, line_no: int, source: str) -> InstructionPair:
    where = f"{source}: line {line_no}"
    if not isinstance(obj, dict):
        raise DataError(f"{where}: record is not an object")
    pair_id = obj.get("id")
    if isinstance(pair_id, int):
        pair_id = str(pair_id)
    if not isinstance(pair_id, str):
        raise DataError(f"{where}: missing or non-string 'id'")
    image = obj.get("image")
    if not isinstance(image, str):
        raise DataError(f"{where}: missing or non-string 'image'")
    system = obj.get("system")
    if system is not None and not isinstance(system, str):
        raise DataError(f"{where}: 'system' must be a string when present")
    conv = obj.get("conversations")
    if not isinstance(conv, list) or len(conv) < 2 or len(conv) % 2 != 0:
        raise DataError(
            f"{where}: 'conversations' must hold alternating human/gpt turns"
        )
    turns: list[tuple[str, str]] = []
    for k in range(0, len(conv), 2):
        human, assistant = conv[k], conv[k + 1]
        for turn, who in ((human, "human"), (assistant, "gpt")):
            if not isinstance(turn, dict) or turn.get("from") != who \
                    or not isinstance(turn.get("value"), str):
                raise DataError(f"{where}: malformed {who} turn at position {k}")
        turns.append((human["value"], assistant["value"]))
    return InstructionPair(
        id=pair_id,
        image_ref=image,
        system=system,
        question=turns[0][0],
        answer=turns[0][1],
        pool=pool_tag,
        extra_turns=tuple(turns[1:]),
    )


def load_pool(path: str | Path, pool_tag: str) -> list[InstructionPair]:
    """Load a line-delimited instruction-pair file and tag every record."""
    if pool_tag not in POOL_TAGS:
        raise DataError(f"unknown pool tag {pool_tag!r}")
    pairs: list[InstructionPair] = []
    with open(path, encoding="utf-8") as handle:
        for line_no, raw in enumerate(handle, start=1):
            line = raw.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}: line {line_no}: invalid JSON ({exc})")
            pairs.append(_pair_from_obj(obj, pool_tag, line_no, str(path)))
    if not pairs:
        log.warning("%s: empty pool file for %s", path, pool_tag)
    return pairs


# Mixture sampling ------------------------------------------------------------


@dataclass
class PoolSet:
    d1: list[InstructionPair] = field(default_factory=list)
    d2: list[InstructionPair] = field(default_factory=list)
    d3: list[InstructionPair] = field(default_factory=list)

    def sizes(self) -> dict[str, int]:
        return {"d1": len(self.d1), "d2": len(self.d2), "d3": len(self.d3)}

    def by_tag(self, tag: str) -> list[InstructionPair]:
        return {"D1": self.d1, "D2": self.d2, "D3": self.d3}[tag]


@dataclass(frozen=True)
class ManifestEntry:
    pool: str
    source_line: int  # 1-based position in the source pool
    id: str


@dataclass
class Manifest:
    seed: int
    counts: dict[str, int]
    ratio: dict[str, float]
    entries: list[ManifestEntry]


def _ratio_of(counts: Mapping[str, int]) -> dict[str, float]:
    base = counts.get("d1", 0)
    if base <= 0:
        base = next((c for c in counts.values() if c > 0), 1)
    return {k: counts.get(k, 0) / base for k in ("d1", "d2", "d3")}


def sample_mixture(
    pools: PoolSet,
    counts: Mapping[str, int],
    seed: int,
    *,
    with_replacement: bool = False,
) -> Manifest:
    """Sample the requested per-pool counts and shuffle the combined order.

    Sampling is without replacement; a count above the pool size is only
    legal with the replacement flag, in which case that pool alone switches
    to replacement (logged). Everything is driven by one seeded generator.
    """
    rng = random.Random(seed)
    entries: list[ManifestEntry] = []
    normalized = {k: int(counts.get(k, 0)) for k in ("d1", "d2", "d3")}
    for tag in POOL_TAGS:
        want = normalized[tag.lower()]
        pool = pools.by_tag(tag)
        if want < 0:
            raise DataError(f"{tag}: negative count {want}")
        if want == 0:
            continue
        if not pool:
            raise DataError(f"{tag}: cannot sample {want} pairs from an empty pool")
        if want <= len(pool):
            chosen = rng.sample(range(len(pool)), want)
        elif with_replacement:
            log.info("%s: oversampling %d from %d with replacement", tag, want, len(pool))
            chosen = rng.choices(range(len(pool)), k=want)
        else:
            raise DataError(
                f"{tag}: count {want} exceeds pool size {len(pool)} "
                f"(pass with_replacement to oversample)"
            )
        entries.extend(
            ManifestEntry(tag, idx + 1, pool[idx].id) for idx in chosen
        )
    rng.shuffle(entries)
    return Manifest(seed=seed, counts=normalized, ratio=_ratio_of(normalized), entries=entries)


def write_manifest(manifest: Manifest, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        header = {"seed": manifest.seed, "counts": manifest.counts, "ratio": manifest.ratio}
        handle.write(json.dumps(header, ensure_ascii=False) + "\n")
        for e in manifest.entries:
            handle.write(
                json.dumps(
                    {"pool": e.pool, "source_line": e.source_line, "id": e.id},
                    ensure_ascii=False,
                )
                + "\n"
            )


def read_manifest_header(path: str | Path) -> dict:
    """Read only the manifest header (seed, counts, ratio)."""
    with open(path, encoding="utf-8") as handle:
        try:
            header = json.loads(next(handle))
        except (StopIteration, json.JSONDecodeError):
            raise DataError(f"{path}: missing or invalid manifest header")
    if not isinstance(header, dict) or "counts" not in header:
        raise DataError(f"{path}: manifest header lacks counts")
    return header


def read_manifest(path: str | Path) -> Manifest:
    with open(path, encoding="utf-8") as handle:
        try:
            header = json.loads(next(handle))
        except (StopIteration, json.JSONDecodeError):
            raise DataError(f"{path}: missing or invalid manifest header")
        if not isinstance(header, dict) or "counts" not in header:
            raise DataError(f"{path}: manifest header lacks counts")
        entries = []
        for line_no, raw in enumerate(handle, start=2):
            line = raw.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                entries.append(
                    ManifestEntry(obj["pool"], int(obj["source_line"]), str(obj["id"]))
                )
            except (json.JSONDecodeError, KeyError, TypeError, ValueError):
                raise DataError(f"{path}: line {line_no}: malformed manifest entry")
    counts = {k: int(v) for k, v in header["counts"].items()}
    return Manifest(
        seed=int(header.get("seed", 0)),
        counts=counts,
        ratio={k: float(v) for k, v in header.get("ratio", _ratio_of(counts)).items()},
        entries=entries,
    )
