"""The trainer/evaluator boundary.

An oracle maps (mixture manifest, seed) to task performances and validation
losses. The synthetic oracle evaluates configured concave response surfaces
over the manifest's realized mixture ratios, for desk-scale verification;
the external oracle shells out to a real training command and reads back a
small result file.
"""

from __future__ import annotations

import json
import math
import os
import shlex
import subprocess
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Protocol

import numpy as np

from .datasets import read_manifest_header
from .errors import (
    ConfigError,
    DataError,
    OracleExecutionError,
    OracleResultError,
    OracleTimeoutError,
)

RESPONSE_FIELDS = ("perf_scoring", "perf_interpreting", "loss_scoring", "loss_interpreting")


@dataclass(frozen=True)
class OracleRequest:
    manifest_path: Path
    seed: int
    validation_tags: tuple[str, ...] = ("scoring", "interpreting")


@dataclass(frozen=True)
class OracleResponse:
    perf_scoring: float
    perf_interpreting: float
    loss_scoring: float
    loss_interpreting: float

    def __post_init__(self) -> None:
        if not -1.0 <= self.perf_scoring <= 1.0:
            raise DataError(f"perf_scoring {self.perf_scoring!r} outside [-1, 1]")
        if not 0.0 <= self.perf_interpreting <= 1.0:
            raise DataError(
                f"perf_interpreting {self.perf_interpreting!r} outside [0, 1]"
            )
        for name in ("loss_scoring", "loss_interpreting"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0.0):
                raise DataError(f"{name} must be a positive real, got {value!r}")


class Oracle(Protocol):
    def evaluate(self, request: OracleRequest) -> OracleResponse: ...


def realized_axes(counts: Mapping[str, int]) -> tuple[float, float]:
    """log10 ratios actually realized by integer manifest counts.

    Returns (log10(d2/d3), log10((d2+d3)/d1)); zero counts are floored at 1
    so stage-1 manifests (no D1) stay evaluable.
    """
    d1 = max(int(counts.get("d1", 0)), 1)
    d2 = max(int(counts.get("d2", 0)), 1)
    d3 = max(int(counts.get("d3", 0)), 1)
    mixed = max(int(counts.get("d2", 0)) + int(counts.get("d3", 0)), 1)
    return math.log10(d2 / d3), math.log10(mixed / d1)


# Synthetic oracle -------------------------------------------------------------


@dataclass(frozen=True)
class ResponseSurface:
    """Concave polynomial response in a log10-ratio axis.

    value(t) = peak_value - curvature*(t - t0)^2 - quartic*(t - t0)^4 with
    t0 = log10(peak_ratio); staying inside the degree-4 model class keeps
    planted optima exactly recoverable by the sweep's polynomial fit.
    """

    peak_ratio: float
    peak_value: float
    curvature: float
    quartic: float = 0.0

    def __post_init__(self) -> None:
        if self.peak_ratio <= 0:
            raise ConfigError(f"peak_ratio must be positive, got {self.peak_ratio}")
        if self.curvature < 0 or self.quartic < 0:
            raise ConfigError("curvature and quartic terms must be nonnegative")

    @property
    def peak_axis(self) -> float:
        return math.log10(self.peak_ratio)

    def value(self, axis: float) -> float:
        d = axis - self.peak_axis
        return self.peak_value - self.curvature * d * d - self.quartic * d ** 4

    @classmethod
    def from_dict(cls, obj: Mapping) -> "ResponseSurface":
        try:
            return cls(
                peak_ratio=float(obj["peak_ratio"]),
                peak_value=float(obj["peak_value"]),
                curvature=float(obj["curvature"]),
                quartic=float(obj.get("quartic", 0.0)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"bad surface config {dict(obj)!r}: {exc}")


@dataclass(frozen=True)
class SyntheticOracleConfig:
    """Planted response surfaces plus a count-driven loss model.

    Losses follow loss = scale * max(count, 1)^(-alpha), with the scoring
    loss driven by the D1 count and the interpreting loss by the D2+D3
    count, which gives the feedback controller a solvable fixed point.
    """

    scoring_surface: ResponseSurface
    interpreting_surface: ResponseSurface
    noise_sigma: float = 0.0
    loss_alpha: float = 0.5
    loss_scale_scoring: float = 30.0
    loss_scale_interpreting: float = 30.0

    @classmethod
    def from_dict(cls, obj: Mapping) -> "SyntheticOracleConfig":
        try:
            return cls(
                scoring_surface=ResponseSurface.from_dict(obj["scoring_surface"]),
                interpreting_surface=ResponseSurface.from_dict(obj["interpreting_surface"]),
                noise_sigma=float(obj.get("noise_sigma", 0.0)),
                loss_alpha=float(obj.get("loss_alpha", 0.5)),
                loss_scale_scoring=float(obj.get("loss_scale_scoring", 30.0)),
                loss_scale_interpreting=float(obj.get("loss_scale_interpreting", 30.0)),
            )
        except KeyError as exc:
            raise ConfigError(f"synthetic oracle config missing {exc}")


def _clamp(value: float, lo: float, hi: float) -> float:
    return min(max(value, lo), hi)


class SyntheticOracle:
    """Deterministic test double: pure function of (request, config)."""

    def __init__(self, config: SyntheticOracleConfig):
        self.config = config

    def evaluate(self, request: OracleRequest) -> OracleResponse:
        header = read_manifest_header(request.manifest_path)
        counts = {k: int(v) for k, v in header["counts"].items()}
        t_d2d3, t_mix = realized_axes(counts)

        perf_scoring = self.config.scoring_surface.value(t_mix)
        perf_interpreting = self.config.interpreting_surface.value(t_d2d3)
        if self.config.noise_sigma > 0:
            rng = np.random.default_rng(request.seed)
            perf_scoring += float(rng.normal(0.0, self.config.noise_sigma))
            perf_interpreting += float(rng.normal(0.0, self.config.noise_sigma))

        alpha = self.config.loss_alpha
        d1 = max(counts.get("d1", 0), 1)
        d23 = max(counts.get("d2", 0) + counts.get("d3", 0), 1)
        return OracleResponse(
            perf_scoring=_clamp(perf_scoring, -1.0, 1.0),
            perf_interpreting=_clamp(perf_interpreting, 0.0, 1.0),
            loss_scoring=self.config.loss_scale_scoring * d1 ** (-alpha),
            loss_interpreting=self.config.loss_scale_interpreting * d23 ** (-alpha),
        )


def synthetic_evaluate(request: OracleRequest, config: SyntheticOracleConfig) -> OracleResponse:
    return SyntheticOracle(config).evaluate(request)


# External-command oracle ------------------------------------------------------


@dataclass(frozen=True)
class ExternalOracleConfig:
    """Command template with {manifest}, {seed} and {out} placeholders.

    The command must write a JSON object with the four response fields to
    the {out} path; stdout/stderr are captured only for diagnostics and are
    never parsed for results.
    """

    command: str
    timeout: float | None = None
    max_parallel: int = 1
    env: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if "{out}" not in self.command:
            raise ConfigError("external oracle command must reference {out}")
        if self.max_parallel < 1:
            raise ConfigError(f"max_parallel must be >= 1, got {self.max_parallel}")

    @classmethod
    def from_dict(cls, obj: Mapping) -> "ExternalOracleConfig":
        try:
            command = obj["command"]
        except KeyError:
            raise ConfigError("external oracle config requires a command template")
        timeout = obj.get("timeout")
        return cls(
            command=str(command),
            timeout=float(timeout) if timeout is not None else None,
            max_parallel=int(obj.get("max_parallel", 1)),
            env=dict(obj.get("env", {})),
        )


class ExternalOracle:
    """Run a training command per request, gated by a parallelism semaphore."""

    def __init__(self, config: ExternalOracleConfig):
        self.config = config
        self._gate = threading.Semaphore(config.max_parallel)

    def evaluate(self, request: OracleRequest) -> OracleResponse:
        out_path = Path(f"{request.manifest_path}.result.json")
        tokens = [
            token.format(
                manifest=str(request.manifest_path),
                seed=request.seed,
                out=str(out_path),
            )
            for token in shlex.split(self.config.command)
        ]
        env = None
        if self.config.env:
            env = dict(os.environ)
            env.update(self.config.env)
        with self._gate:
            try:
                proc = subprocess.run(
                    tokens,
                    capture_output=True,
                    text=True,
                    timeout=self.config.timeout,
                    env=env,
                )
            except subprocess.TimeoutExpired:
                raise OracleTimeoutError(
                    f"oracle command timed out after {self.config.timeout}s: {tokens}"
                )
            except OSError as exc:
                raise OracleExecutionError(f"cannot run oracle command {tokens}: {exc}")
        if proc.returncode != 0:
            raise OracleExecutionError(
                f"oracle command exited {proc.returncode}: {tokens}\n"
                f"stderr: {proc.stderr.strip()[-2000:]}"
            )
        return self._read_result(out_path)

    @staticmethod
    def _read_result(out_path: Path) -> OracleResponse:
        if not out_path.is_file():
            raise OracleResultError(f"oracle result file missing: {out_path}")
        try:
            obj = json.loads(out_path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise OracleResultError(f"unreadable oracle result {out_path}: {exc}")
        if not isinstance(obj, dict):
            raise OracleResultError(f"{out_path}: result is not an object")
        missing = [k for k in RESPONSE_FIELDS if k not in obj]
        if missing:
            raise OracleResultError(f"{out_path}: missing fields {missing}")
        try:
            return OracleResponse(**{k: float(obj[k]) for k in RESPONSE_FIELDS})
        except (TypeError, ValueError) as exc:
            raise OracleResultError(f"{out_path}: non-numeric result field ({exc})")
        except DataError as exc:
            raise OracleResultError(f"{out_path}: {exc}")


def external_evaluate(request: OracleRequest, config: ExternalOracleConfig) -> OracleResponse:
    return ExternalOracle(config).evaluate(request)
