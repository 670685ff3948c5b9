"""Coarse-grained optimal data-mix ratio estimation.

Two one-dimensional stages: sweep the D2:D3 ratio with the anchor pool used
in full, fit a fourth-degree polynomial to performance over the log10 ratio
axis, and take its constrained maximizer; then sweep the combined
interpreting pool against D1 the same way. The composed D1:D2:D3 ratio plus
the scoring/interpreting loss ratio measured at a confirmation run feed the
fine-grained per-epoch controller.

Performance points carry the ratio *realized* by the integer manifest
counts, not the nominal grid value, so fits are made against the mixtures
that were actually trained.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Sequence

import numpy as np
from numpy.polynomial import polynomial as npoly

from .datasets import PoolSet, sample_mixture, write_manifest
from .errors import ConfigError, RankDeficientFitError
from .oracle import Oracle, OracleRequest, OracleResponse, realized_axes
from .util import derive_seed, round_half_up

log = logging.getLogger(__name__)

Stage = Literal["d2_vs_d3", "mixed_vs_d1"]
STAGES = ("d2_vs_d3", "mixed_vs_d1")
AxisKind = Literal["log10", "fraction"]


@dataclass(frozen=True)
class MixRatio:
    """Relative D1:D2:D3 sampling weights (not normalized)."""

    d1: float
    d2: float
    d3: float

    def __post_init__(self) -> None:
        weights = (self.d1, self.d2, self.d3)
        if any(not math.isfinite(w) or w < 0 for w in weights):
            raise ConfigError(f"mix weights must be finite and nonnegative: {weights}")
        if not any(w > 0 for w in weights):
            raise ConfigError("at least one mix weight must be positive")

    @classmethod
    def from_stage_ratios(cls, d2_d3: float, mixed_d1: float) -> "MixRatio":
        """Compose d1=1 weights from the two stage ratios."""
        share = d2_d3 / (1.0 + d2_d3)
        return cls(1.0, mixed_d1 * share, mixed_d1 * (1.0 - share))

    def normalized(self) -> tuple[float, float, float]:
        total = self.d1 + self.d2 + self.d3
        return (self.d1 / total, self.d2 / total, self.d3 / total)

    def counts_for_d1_base(self, d1_count: int) -> dict[str, int]:
        """Integer per-pool counts with D1 pinned to d1_count."""
        if self.d1 <= 0:
            raise ConfigError("counts_for_d1_base requires a positive d1 weight")
        scale = d1_count / self.d1
        return {
            "d1": d1_count,
            "d2": round_half_up(self.d2 * scale),
            "d3": round_half_up(self.d3 * scale),
        }


@dataclass(frozen=True)
class PerformancePoint:
    """One swept mixture: realized log10 ratio, mean performance and losses."""

    ratio_axis_value: float
    performance: float
    repeats: int
    loss_scoring: float
    loss_interpreting: float

    def to_dict(self) -> dict:
        return {
            "axis": self.ratio_axis_value,
            "performance": self.performance,
            "repeats": self.repeats,
            "loss_scoring": self.loss_scoring,
            "loss_interpreting": self.loss_interpreting,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "PerformancePoint":
        return cls(
            ratio_axis_value=float(obj["axis"]),
            performance=float(obj["performance"]),
            repeats=int(obj["repeats"]),
            loss_scoring=float(obj["loss_scoring"]),
            loss_interpreting=float(obj["loss_interpreting"]),
        )


@dataclass(frozen=True)
class FittedCurve:
    """Least-squares degree-4 polynomial over the sweep axis.

    Coefficients are ascending (c0..c4). Maximizer queries never leave
    fit_domain, so the curve is not used to extrapolate.
    """

    coefficients: tuple[float, float, float, float, float]
    fit_domain: tuple[float, float]
    residual_rms: float
    axis: AxisKind = "log10"

    def __call__(self, x: float | np.ndarray) -> float | np.ndarray:
        return npoly.polyval(x, np.asarray(self.coefficients))

    def to_dict(self) -> dict:
        return {
            "coefficients": list(self.coefficients),
            "fit_domain": list(self.fit_domain),
            "residual_rms": self.residual_rms,
            "axis": self.axis,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "FittedCurve":
        return cls(
            coefficients=tuple(float(c) for c in obj["coefficients"]),
            fit_domain=(float(obj["fit_domain"][0]), float(obj["fit_domain"][1])),
            residual_rms=float(obj["residual_rms"]),
            axis=obj.get("axis", "log10"),
        )


def build_sweep_grid(stage: Stage) -> tuple[float, ...]:
    """Sweep grid for a stage, as sorted ascending log10 ratio values."""
    return tuple(math.log10(r) for r in grid_ratios(stage))


def grid_ratios(stage: Stage) -> tuple[float, ...]:
    """Default component-ratio grid for a stage, sorted ascending.

    Stage 1 sweeps D2:D3 from 1:0.1 up to 1:1 (full D2) and from 1:1 up to
    1:10 (full D3), with the shared 1:1 point collapsed. Stage 2 sweeps the
    combined interpreting pool against D1 over 0.1..0.9 then 1..10.
    """
    if stage == "d2_vs_d3":
        ratios = {10.0 / k for k in range(1, 11)} | {k / 10.0 for k in range(1, 11)}
    elif stage == "mixed_vs_d1":
        ratios = {k / 10.0 for k in range(1, 10)} | {float(k) for k in range(1, 11)}
    else:
        raise ConfigError(f"unknown sweep stage {stage!r}")
    return tuple(sorted(ratios))


def compose_counts(
    stage: Stage,
    ratio: float,
    pool_sizes: dict[str, int],
    d2_d3_ratio: float | None = None,
) -> dict[str, int]:
    """Integer per-pool counts realizing one grid ratio.

    Stage 1 keeps the larger-share pool whole (the full D2 dataset on the
    1:<=1 side, the full D3 dataset on the other) and scales the remaining
    pool. Stage 2 uses the whole D1 pool as the base and splits the combined
    interpreting count at the stage-1 ratio.
    """
    if ratio <= 0:
        raise ConfigError(f"grid ratio must be positive, got {ratio}")
    if stage == "d2_vs_d3":
        if ratio >= 1.0:
            d2 = pool_sizes["d2"]
            d3 = max(1, round_half_up(d2 / ratio))
        else:
            d3 = pool_sizes["d3"]
            d2 = max(1, round_half_up(d3 * ratio))
        return {"d1": 0, "d2": d2, "d3": d3}
    if stage == "mixed_vs_d1":
        if d2_d3_ratio is None or d2_d3_ratio <= 0:
            raise ConfigError("stage mixed_vs_d1 requires a positive d2_d3_ratio")
        d1 = pool_sizes["d1"]
        mixed = max(1, round_half_up(d1 * ratio))
        share = d2_d3_ratio / (1.0 + d2_d3_ratio)
        d2 = round_half_up(mixed * share)
        return {"d1": d1, "d2": d2, "d3": mixed - d2}
    raise ConfigError(f"unknown sweep stage {stage!r}")


class SweepFailure(Exception):
    """Oracle failure mid-sweep; carries the points completed so far."""

    def __init__(self, cause: Exception, completed: list[PerformancePoint]):
        super().__init__(str(cause))
        self.cause = cause
        self.completed = completed


def _point_axis(stage: Stage, counts: dict[str, int]) -> float:
    t_d2d3, t_mix = realized_axes(counts)
    return t_d2d3 if stage == "d2_vs_d3" else t_mix


def _point_performance(stage: Stage, response: OracleResponse, scoring_weight: float) -> float:
    if stage == "d2_vs_d3":
        return response.perf_interpreting
    return (
        scoring_weight * response.perf_scoring
        + (1.0 - scoring_weight) * response.perf_interpreting
    )


def sweep(
    oracle: Oracle,
    stage: Stage,
    pools: PoolSet,
    *,
    repeats: int = 3,
    seed: int = 0,
    workdir: str | Path,
    ratios: Sequence[float] | None = None,
    d2_d3_ratio: float | None = None,
    scoring_weight: float = 0.5,
    jobs: int = 1,
) -> list[PerformancePoint]:
    """Evaluate every grid ratio `repeats` times and average.

    Each (point, repeat) gets its own derived seed, its own sampled manifest
    on disk, and one oracle call; results are aggregated in grid order no
    matter how many worker threads ran them. Raises SweepFailure on the
    first oracle error, carrying the fully completed points.
    """
    if repeats < 1:
        raise ConfigError(f"repeats must be >= 1, got {repeats}")
    grid = tuple(sorted(ratios)) if ratios else grid_ratios(stage)
    sizes = pools.sizes()
    manifest_dir = Path(workdir) / "manifests" / stage
    manifest_dir.mkdir(parents=True, exist_ok=True)

    requests: list[OracleRequest] = []
    point_counts: list[dict[str, int]] = []
    for point_idx, ratio in enumerate(grid):
        counts = compose_counts(stage, ratio, sizes, d2_d3_ratio)
        point_counts.append(counts)
        oversample = any(counts[k] > sizes[k] for k in counts)
        if oversample:
            log.info("%s point %d: counts exceed pool sizes, sampling with replacement",
                     stage, point_idx)
        for rep in range(repeats):
            rep_seed = derive_seed(seed, stage, point_idx, rep)
            manifest = sample_mixture(pools, counts, rep_seed, with_replacement=oversample)
            path = manifest_dir / f"point{point_idx:02d}_rep{rep}.jsonl"
            write_manifest(manifest, path)
            requests.append(OracleRequest(path, rep_seed))

    responses: list[OracleResponse | Exception] = [None] * len(requests)  # type: ignore
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(oracle.evaluate, req) for req in requests]
            for i, fut in enumerate(futures):
                try:
                    responses[i] = fut.result()
                except Exception as exc:  # noqa: BLE001 - first failure aborts the sweep
                    for pending in futures[i + 1:]:
                        pending.cancel()
                    responses[i] = exc
                    break
    else:
        for i, req in enumerate(requests):
            try:
                responses[i] = oracle.evaluate(req)
            except Exception as exc:  # noqa: BLE001
                responses[i] = exc
                break

    points: list[PerformancePoint] = []
    for point_idx in range(len(grid)):
        chunk = responses[point_idx * repeats : (point_idx + 1) * repeats]
        failure = next((r for r in chunk if isinstance(r, Exception)), None)
        if failure is not None or any(r is None for r in chunk):
            raise SweepFailure(failure or RuntimeError("sweep aborted"), points)
        perfs = [_point_performance(stage, r, scoring_weight) for r in chunk]
        points.append(
            PerformancePoint(
                ratio_axis_value=_point_axis(stage, point_counts[point_idx]),
                performance=float(np.mean(perfs)),
                repeats=repeats,
                loss_scoring=float(np.mean([r.loss_scoring for r in chunk])),
                loss_interpreting=float(np.mean([r.loss_interpreting for r in chunk])),
            )
        )
    return points


def _to_axis(log10_value: float, axis: AxisKind) -> float:
    if axis == "log10":
        return log10_value
    ratio = 10.0 ** log10_value
    return ratio / (1.0 + ratio)


def axis_to_ratio(value: float, axis: AxisKind = "log10") -> float:
    if axis == "log10":
        return 10.0 ** value
    if not 0.0 < value < 1.0:
        raise ConfigError(f"fraction axis value must be in (0, 1), got {value}")
    return value / (1.0 - value)


def fit_curve(points: Sequence[PerformancePoint], axis: AxisKind = "log10") -> FittedCurve:
    """Least-squares degree-4 fit of performance over the sweep axis."""
    x = np.asarray([_to_axis(p.ratio_axis_value, axis) for p in points], dtype=np.float64)
    y = np.asarray([p.performance for p in points], dtype=np.float64)
    if len(np.unique(x)) < 5:
        raise RankDeficientFitError(
            f"degree-4 fit needs >= 5 distinct axis values, got {len(np.unique(x))}"
        )
    coef = npoly.polyfit(x, y, 4)
    residuals = npoly.polyval(x, coef) - y
    return FittedCurve(
        coefficients=tuple(float(c) for c in coef),
        fit_domain=(float(x.min()), float(x.max())),
        residual_rms=float(np.sqrt(np.mean(residuals * residuals))),
        axis=axis,
    )


def argmax_ratio(curve: FittedCurve) -> float:
    """Maximizer of the fitted polynomial over its fit domain.

    Candidates are the real roots of the derivative cubic plus both domain
    endpoints (exact for degree 4); ties go to the smaller axis value.
    Near-zero leading derivative coefficients are trimmed before
    root-finding so lower-degree fits stay well conditioned.
    """
    lo, hi = curve.fit_domain
    coef = np.asarray(curve.coefficients, dtype=np.float64)
    dcoef = npoly.polyder(coef)
    # Threshold against the polynomial's own coefficient scale: a derivative
    # that is pure fit noise (constant curve) must vanish entirely.
    tol = 1e-12 * max(1.0, float(np.max(np.abs(coef))))
    trimmed = np.trim_zeros(np.where(np.abs(dcoef) > tol, dcoef, 0.0), trim="b")
    candidates = [lo, hi]
    if trimmed.size >= 2:
        for root in npoly.polyroots(trimmed):
            if abs(root.imag) < 1e-9 and lo <= root.real <= hi:
                candidates.append(float(root.real))
    candidates.sort()
    best = candidates[0]
    best_value = float(npoly.polyval(best, coef))
    # Improvements below fit-noise level count as ties, which go to the
    # smaller axis value.
    tie_eps = 1e-12 * max(1.0, float(np.max(np.abs(coef))))
    for cand in candidates[1:]:
        value = float(npoly.polyval(cand, coef))
        if value > best_value + tie_eps:
            best, best_value = cand, value
    return best


@dataclass
class SearchConfig:
    """Knobs for the two-stage coarse search."""

    workdir: Path
    seed: int = 0
    repeats: int = 3
    jobs: int = 1
    scoring_weight: float = 0.5
    axis: AxisKind = "log10"
    stage1_ratios: tuple[float, ...] | None = None
    stage2_ratios: tuple[float, ...] | None = None


@dataclass
class CoarseResult:
    """Outcome of the coarse search: composed ratio plus reference loss ratio."""

    ratio: MixRatio
    lambda_loss: float
    d2_d3_ratio: float = 0.0
    mixed_d1_ratio: float = 0.0
    stage1_curve: FittedCurve | None = None
    stage2_curve: FittedCurve | None = None
    stage1_points: list[PerformancePoint] = field(default_factory=list)
    stage2_points: list[PerformancePoint] = field(default_factory=list)
    confirmation: dict = field(default_factory=dict)
    seed: int = 0
    repeats: int = 3


def _stage_result(curve: FittedCurve, points: list[PerformancePoint],
                  argmax_axis: float, ratio: float) -> dict:
    return {
        "points": [p.to_dict() for p in points],
        "curve": curve.to_dict(),
        "argmax_axis": argmax_axis,
        "ratio": ratio,
    }


def coarse_result_to_dict(result: CoarseResult) -> dict:
    from . import __version__

    doc: dict = {
        "tool_version": __version__,
        "seed": result.seed,
        "repeats": result.repeats,
        "mix_ratio": {"d1": result.ratio.d1, "d2": result.ratio.d2, "d3": result.ratio.d3},
        "lambda_loss": result.lambda_loss,
        "confirmation": result.confirmation,
    }
    if result.stage1_curve is not None:
        doc["stage1"] = _stage_result(
            result.stage1_curve, result.stage1_points,
            argmax_ratio(result.stage1_curve), result.d2_d3_ratio,
        )
    if result.stage2_curve is not None:
        doc["stage2"] = _stage_result(
            result.stage2_curve, result.stage2_points,
            argmax_ratio(result.stage2_curve), result.mixed_d1_ratio,
        )
    return doc


def coarse_result_from_dict(doc: dict) -> CoarseResult:
    ratio = MixRatio(**{k: float(v) for k, v in doc["mix_ratio"].items()})
    result = CoarseResult(
        ratio=ratio,
        lambda_loss=float(doc["lambda_loss"]),
        confirmation=doc.get("confirmation", {}),
        seed=int(doc.get("seed", 0)),
        repeats=int(doc.get("repeats", 3)),
    )
    for stage_key, curve_attr, points_attr, ratio_attr in (
        ("stage1", "stage1_curve", "stage1_points", "d2_d3_ratio"),
        ("stage2", "stage2_curve", "stage2_points", "mixed_d1_ratio"),
    ):
        stage = doc.get(stage_key)
        if stage:
            setattr(result, curve_attr, FittedCurve.from_dict(stage["curve"]))
            setattr(result, points_attr,
                    [PerformancePoint.from_dict(p) for p in stage["points"]])
            setattr(result, ratio_attr, float(stage["ratio"]))
    return result


def _persist(doc: dict, out_path: Path | None) -> None:
    if out_path is None:
        return
    import json

    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text(json.dumps(doc, indent=2, ensure_ascii=False) + "\n",
                        encoding="utf-8")


def _persist_partial(out_path: Path | None, stage: Stage, error: Exception,
                     completed: list[PerformancePoint],
                     stage1: dict | None, seed: int, repeats: int) -> None:
    from . import __version__

    doc = {
        "tool_version": __version__,
        "seed": seed,
        "repeats": repeats,
        "stage": stage,
        "error": str(error),
        "partial_points": [p.to_dict() for p in completed],
    }
    if stage1 is not None:
        doc["stage1"] = stage1
    _persist(doc, out_path)


def _warn_if_boundary(stage: Stage, argmax_axis: float, curve: FittedCurve) -> None:
    lo, hi = curve.fit_domain
    if argmax_axis in (lo, hi):
        log.warning(
            "%s: fitted maximum sits on the sweep boundary (axis %.6g); "
            "the performance surface may be flat or monotone over the grid",
            stage, argmax_axis,
        )


def coarse_search(
    oracle: Oracle,
    pools: PoolSet,
    config: SearchConfig,
    out_path: str | Path | None = None,
) -> CoarseResult:
    """Run both sweep stages, compose the mix ratio, and record the
    reference loss ratio at a confirmation run of the chosen mixture.

    On oracle failure the completed points are persisted with a stage
    marker before the original error propagates.
    """
    out = Path(out_path) if out_path is not None else None
    workdir = Path(config.workdir)

    try:
        pts1 = sweep(
            oracle, "d2_vs_d3", pools,
            repeats=config.repeats, seed=config.seed, workdir=workdir,
            ratios=config.stage1_ratios, scoring_weight=config.scoring_weight,
            jobs=config.jobs,
        )
    except SweepFailure as failure:
        _persist_partial(out, "d2_vs_d3", failure.cause, failure.completed,
                         None, config.seed, config.repeats)
        raise failure.cause
    curve1 = fit_curve(pts1, config.axis)
    t1 = argmax_ratio(curve1)
    _warn_if_boundary("d2_vs_d3", t1, curve1)
    d2_d3 = axis_to_ratio(t1, config.axis)

    stage1_doc = _stage_result(curve1, pts1, t1, d2_d3)
    try:
        pts2 = sweep(
            oracle, "mixed_vs_d1", pools,
            repeats=config.repeats, seed=config.seed, workdir=workdir,
            ratios=config.stage2_ratios, d2_d3_ratio=d2_d3,
            scoring_weight=config.scoring_weight, jobs=config.jobs,
        )
    except SweepFailure as failure:
        _persist_partial(out, "mixed_vs_d1", failure.cause, failure.completed,
                         stage1_doc, config.seed, config.repeats)
        raise failure.cause
    curve2 = fit_curve(pts2, config.axis)
    t2 = argmax_ratio(curve2)
    _warn_if_boundary("mixed_vs_d1", t2, curve2)
    mixed_d1 = axis_to_ratio(t2, config.axis)

    ratio = MixRatio.from_stage_ratios(d2_d3, mixed_d1)
    counts = ratio.counts_for_d1_base(len(pools.d1))
    sizes = pools.sizes()
    confirm_seed = derive_seed(config.seed, "confirm")
    manifest = sample_mixture(
        pools, counts, confirm_seed,
        with_replacement=any(counts[k] > sizes[k] for k in counts),
    )
    confirm_path = workdir / "manifests" / "confirm.jsonl"
    confirm_path.parent.mkdir(parents=True, exist_ok=True)
    write_manifest(manifest, confirm_path)
    response = oracle.evaluate(OracleRequest(confirm_path, confirm_seed))

    result = CoarseResult(
        ratio=ratio,
        lambda_loss=response.loss_scoring / response.loss_interpreting,
        d2_d3_ratio=d2_d3,
        mixed_d1_ratio=mixed_d1,
        stage1_curve=curve1,
        stage2_curve=curve2,
        stage1_points=pts1,
        stage2_points=pts2,
        confirmation={
            "counts": counts,
            "loss_scoring": response.loss_scoring,
            "loss_interpreting": response.loss_interpreting,
            "perf_scoring": response.perf_scoring,
            "perf_interpreting": response.perf_interpreting,
        },
        seed=config.seed,
        repeats=config.repeats,
    )
    _persist(coarse_result_to_dict(result), out)
    return result
