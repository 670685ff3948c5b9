"""Command-line surface.

One binary with subcommands: convert, score, eval-iqa, eval-mcq, eval-desc,
subsample, mix-search, mix-adjust, sample. Exit codes are stable: 0 success,
1 data error, 2 config error, 3 oracle/external failure. Every mutating
command writes a run record alongside its outputs; flags override config
values, and IQMIX_-prefixed environment variables supply flag defaults.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from collections import Counter
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Sequence

import yaml

from . import __version__
from .controller import run_loop
from .datasets import (
    MosRecord,
    PoolSet,
    ingest_mos,
    emit_d1_pairs,
    load_pool,
    sample_mixture,
    subsample_balanced,
    write_manifest,
    write_pairs,
)
from .errors import ConfigError, DataError, IqmixError, OracleError
from .levels import LevelScale
from .metrics import (
    DescriptionRating,
    McqRecord,
    PairedSample,
    description_report,
    mcq_report,
    plcc,
    srcc,
)
from .mixopt import (
    MixRatio,
    SearchConfig,
    coarse_result_from_dict,
    coarse_search,
)
from .oracle import (
    ExternalOracle,
    ExternalOracleConfig,
    Oracle,
    SyntheticOracle,
    SyntheticOracleConfig,
)
from .scoring import BatchDiagnostic, rescale_score, score_batch

log = logging.getLogger(__name__)


def _env_default(name: str, cast, fallback=None):
    raw = os.environ.get(f"IQMIX_{name}")
    if raw is None:
        return fallback
    try:
        return cast(raw)
    except ValueError:
        raise ConfigError(f"environment variable IQMIX_{name}={raw!r} is not valid")


def _resolve(*values, default=None):
    for value in values:
        if value is not None:
            return value
    return default


# Run records ------------------------------------------------------------------


@dataclass
class RunRecord:
    command: str
    config_hash: str
    seed: int
    tool_version: str
    outputs: list[str]
    started: str
    finished: str

    def write(self, path: Path) -> None:
        path.write_text(
            json.dumps(self.__dict__, indent=2, ensure_ascii=False) + "\n",
            encoding="utf-8",
        )


def _config_hash(flags: dict, input_paths: Sequence[str | Path]) -> str:
    digest = hashlib.sha256()
    digest.update(json.dumps(flags, sort_keys=True, default=str).encode("utf-8"))
    for path in input_paths:
        digest.update(b"\x00" + str(path).encode("utf-8") + b"\x00")
        digest.update(Path(path).read_bytes())
    return digest.hexdigest()


def _write_run_record(
    command: str,
    flags: dict,
    inputs: Sequence[str | Path],
    outputs: Sequence[str | Path],
    seed: int,
    started: str,
    record_path: Path,
) -> None:
    RunRecord(
        command=command,
        config_hash=_config_hash(flags, inputs),
        seed=seed,
        tool_version=__version__,
        outputs=[str(p) for p in outputs],
        started=started,
        finished=_now(),
    ).write(record_path)


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


# Shared input helpers ----------------------------------------------------------


def _read_scores(path: str | Path) -> dict[str, float]:
    scores: dict[str, float] = {}
    with open(path, encoding="utf-8") as handle:
        for line_no, raw in enumerate(handle, start=1):
            line = raw.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                scores[str(obj["id"])] = float(obj["score"])
            except (json.JSONDecodeError, KeyError, TypeError, ValueError):
                raise DataError(f"{path}: line {line_no}: malformed score record")
    if not scores:
        raise DataError(f"{path}: no score records")
    return scores


def _read_mos_column(path: str | Path, delimiter: str = ",") -> dict[str, float]:
    import csv

    values: dict[str, float] = {}
    with open(path, newline="", encoding="utf-8") as handle:
        reader = csv.reader(handle, delimiter=delimiter)
        try:
            header = next(reader)
            id_col, mos_col = header.index("image_id"), header.index("mos")
        except (StopIteration, ValueError):
            raise DataError(f"{path}: header must contain image_id and mos columns")
        for row_no, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                values[row[id_col]] = float(row[mos_col])
            except (IndexError, ValueError):
                raise DataError(f"{path}: row {row_no}: malformed record")
    if not values:
        raise DataError(f"{path}: no MOS records")
    return values


def _load_yaml(path: str | Path) -> dict:
    try:
        with open(path, encoding="utf-8") as handle:
            doc = yaml.safe_load(handle)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}")
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid config {path}: {exc}")
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: config root must be a mapping")
    return doc


def _load_pools(conf: dict) -> PoolSet:
    pools_conf = conf.get("pools")
    if not isinstance(pools_conf, dict):
        raise ConfigError("config requires a pools mapping with d1/d2/d3 paths")
    missing = [key for key in ("d1", "d2", "d3") if not pools_conf.get(key)]
    if missing:
        raise ConfigError(f"config pools missing path(s): {', '.join(missing)}")
    pools = PoolSet()
    for key in ("d1", "d2", "d3"):
        setattr(pools, key, load_pool(pools_conf[key], key.upper()))
    return pools


def _build_oracle(conf: dict) -> Oracle:
    oracle_conf = conf.get("oracle")
    if not isinstance(oracle_conf, dict):
        raise ConfigError("config requires an oracle mapping")
    kind = oracle_conf.get("kind")
    if kind == "synthetic":
        return SyntheticOracle(SyntheticOracleConfig.from_dict(oracle_conf))
    if kind == "external":
        return ExternalOracle(ExternalOracleConfig.from_dict(oracle_conf))
    raise ConfigError(f"oracle.kind must be synthetic or external, got {kind!r}")


# Subcommands -------------------------------------------------------------------


def cmd_convert(args: argparse.Namespace) -> int:
    started = _now()
    scale = LevelScale(args.scale_min, args.scale_max)
    records, stats = ingest_mos(
        args.mos_file, scale, delimiter=args.delimiter, strict=not args.lenient
    )
    pairs = emit_d1_pairs(records, scale)
    out = Path(args.out)
    write_pairs(pairs, out, inline_system=args.inline_system)

    histogram = Counter(p.answer for p in pairs)
    print(f"converted {len(pairs)} records "
          f"(mos mean {stats.mean_mos:.3f}, std {stats.std_mos:.3f})")
    for label in scale.labels:
        answer = f"The quality of the image is {label}."
        print(f"  {label:<10} {histogram.get(answer, 0)}")

    _write_run_record(
        "convert",
        {"scale": [args.scale_min, args.scale_max], "delimiter": args.delimiter,
         "lenient": args.lenient, "inline_system": args.inline_system,
         "out": str(out)},
        [args.mos_file], [out], seed=0, started=started,
        record_path=out.with_name(out.name + ".run.json"),
    )
    return 0


def cmd_score(args: argparse.Namespace) -> int:
    started = _now()
    binary = args.mode == "binary"
    rescale = None
    if args.rescale is not None:
        if binary:
            raise ConfigError("--rescale applies to five-level mode only")
        rescale = LevelScale(args.rescale[0], args.rescale[1])
    out = Path(args.out)
    diagnostics = 0
    with open(args.logits_file, encoding="utf-8") as src, \
            open(out, "w", encoding="utf-8") as dst:
        for item in score_batch(src, binary=binary, strict=args.strict):
            if isinstance(item, BatchDiagnostic):
                diagnostics += 1
                print(f"line {item.line_no}: {item.message}", file=sys.stderr)
                continue
            score = item.score if rescale is None else rescale_score(item.score, rescale)
            dst.write(json.dumps({"id": item.item_id, "score": score}) + "\n")
    if diagnostics:
        print(f"{diagnostics} malformed record(s) skipped", file=sys.stderr)

    _write_run_record(
        "score",
        {"mode": args.mode, "strict": args.strict, "rescale": args.rescale,
         "out": str(out)},
        [args.logits_file], [out], seed=0, started=started,
        record_path=out.with_name(out.name + ".run.json"),
    )
    return 0


def _emit_report(doc: dict, text: str, fmt: str) -> None:
    if fmt == "json":
        print(json.dumps(doc, indent=2, ensure_ascii=False))
    else:
        print(text)


def cmd_eval_iqa(args: argparse.Namespace) -> int:
    scores = _read_scores(args.scores_file)
    mos = _read_mos_column(args.mos_file, delimiter=args.delimiter)
    shared = [key for key in scores if key in mos]
    missing = (len(scores) - len(shared)) + sum(1 for k in mos if k not in scores)
    if missing:
        log.warning("%d id(s) present on only one side were dropped", missing)
    if len(shared) < 2:
        raise DataError(
            f"join produced {len(shared)} shared id(s); need at least 2"
        )
    sample = PairedSample.from_arrays(
        [scores[k] for k in shared], [mos[k] for k in shared]
    )
    s, p = srcc(sample), plcc(sample, logistic=args.logistic)
    doc = {"count": len(shared), "srcc": s, "plcc": p, "avg": 0.5 * (s + p)}
    text = (f"n      {len(shared)}\n"
            f"srcc   {s:.6f}\n"
            f"plcc   {p:.6f}\n"
            f"avg    {0.5 * (s + p):.6f}")
    _emit_report(doc, text, args.format)
    return 0


def cmd_eval_mcq(args: argparse.Namespace) -> int:
    records = []
    with open(args.answers_file, encoding="utf-8") as handle:
        for line_no, raw in enumerate(handle, start=1):
            line = raw.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                records.append(
                    McqRecord(
                        question_id=str(obj["id"]),
                        question_type=obj["type"],
                        quadrant=obj["quadrant"],
                        choices=tuple(obj["choices"]),
                        gold=obj["gold"],
                        predicted=str(obj.get("predicted", "")),
                    )
                )
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise DataError(f"{args.answers_file}: line {line_no}: {exc}")
    report = mcq_report(records)
    _emit_report(report.to_dict(), report.as_text(), args.format)
    return 0


def cmd_eval_desc(args: argparse.Namespace) -> int:
    ratings = []
    with open(args.ratings_file, encoding="utf-8") as handle:
        for line_no, raw in enumerate(handle, start=1):
            line = raw.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                ratings.append(DescriptionRating(obj["dimension"], int(obj["rating"])))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DataError(f"{args.ratings_file}: line {line_no}: {exc}")
    report = description_report(ratings)
    _emit_report(report.to_dict(), report.as_text(), args.format)
    return 0


def cmd_subsample(args: argparse.Namespace) -> int:
    started = _now()
    seed = _resolve(args.seed, _env_default("SEED", int), default=0)
    values = _read_mos_column(args.mos_file, delimiter=args.delimiter)
    records = [MosRecord(k, v) for k, v in values.items()]
    subset = subsample_balanced(records, args.target, bins=args.bins, seed=seed)
    out = Path(args.out)
    with open(out, "w", encoding="utf-8") as handle:
        handle.write("image_id,mos\n")
        for rec in subset:
            handle.write(f"{rec.image_id},{rec.mos!r}\n")
    print(f"subsampled {len(subset)} of {len(records)} records into {out}")

    _write_run_record(
        "subsample",
        {"target": args.target, "bins": args.bins, "out": str(out)},
        [args.mos_file], [out], seed=seed, started=started,
        record_path=out.with_name(out.name + ".run.json"),
    )
    return 0


def _parse_triplet(text: str, what: str) -> tuple[float, float, float]:
    parts = text.replace(",", ":").split(":")
    if len(parts) != 3:
        raise ConfigError(f"{what} must be three colon-separated values, got {text!r}")
    try:
        return tuple(float(p) for p in parts)  # type: ignore[return-value]
    except ValueError:
        raise ConfigError(f"{what} must be numeric, got {text!r}")


def cmd_sample(args: argparse.Namespace) -> int:
    started = _now()
    conf = _load_yaml(args.config)
    seed = _resolve(args.seed, _env_default("SEED", int), conf.get("seed"), default=0)
    pools = _load_pools(conf)
    if args.counts is not None:
        c1, c2, c3 = _parse_triplet(args.counts, "--counts")
        counts = {"d1": int(c1), "d2": int(c2), "d3": int(c3)}
    elif args.ratio is not None:
        r1, r2, r3 = _parse_triplet(args.ratio, "--ratio")
        counts = MixRatio(r1, r2, r3).counts_for_d1_base(len(pools.d1))
    else:
        raise ConfigError("sample requires --counts or --ratio")
    manifest = sample_mixture(pools, counts, seed,
                              with_replacement=args.with_replacement)
    out = Path(args.out)
    write_manifest(manifest, out)
    print(f"manifest with {len(manifest.entries)} entries "
          f"(counts {manifest.counts}) written to {out}")

    pool_paths = [conf["pools"][k] for k in ("d1", "d2", "d3")]
    _write_run_record(
        "sample",
        {"counts": counts, "with_replacement": args.with_replacement, "out": str(out)},
        [args.config, *pool_paths], [out], seed=seed, started=started,
        record_path=out.with_name(out.name + ".run.json"),
    )
    return 0


def cmd_mix_search(args: argparse.Namespace) -> int:
    started = _now()
    conf = _load_yaml(args.config)
    seed = _resolve(args.seed, _env_default("SEED", int), conf.get("seed"), default=0)
    jobs = _resolve(args.jobs, _env_default("JOBS", int), conf.get("jobs"), default=1)
    repeats = _resolve(args.repeats, conf.get("repeats"), default=3)
    out_dir = Path(_resolve(args.out_dir, conf.get("out_dir"), default="mix-search-run"))
    out_dir.mkdir(parents=True, exist_ok=True)

    pools = _load_pools(conf)
    oracle = _build_oracle(conf)
    grid_conf = conf.get("grid") or {}
    config = SearchConfig(
        workdir=out_dir,
        seed=int(seed),
        repeats=int(repeats),
        jobs=int(jobs),
        scoring_weight=float(conf.get("scoring_weight", 0.5)),
        axis=conf.get("axis", "log10"),
        stage1_ratios=tuple(grid_conf["stage1"]) if grid_conf.get("stage1") else None,
        stage2_ratios=tuple(grid_conf["stage2"]) if grid_conf.get("stage2") else None,
    )
    result_path = out_dir / "coarse_result.json"
    result = coarse_search(oracle, pools, config, out_path=result_path)
    print(f"d2:d3 ratio        {result.d2_d3_ratio:.6g}")
    print(f"(d2+d3):d1 ratio   {result.mixed_d1_ratio:.6g}")
    print(f"mix ratio d1:d2:d3 {result.ratio.d1:.4g}:{result.ratio.d2:.4g}:{result.ratio.d3:.4g}")
    print(f"reference loss ratio {result.lambda_loss:.6g}")
    print(f"result written to {result_path}")

    pool_paths = [conf["pools"][k] for k in ("d1", "d2", "d3")]
    _write_run_record(
        "mix-search",
        {"seed": int(seed), "repeats": int(repeats), "jobs": int(jobs),
         "out_dir": str(out_dir)},
        [args.config, *pool_paths], [result_path], seed=int(seed), started=started,
        record_path=out_dir / "runrecord.json",
    )
    return 0


def cmd_mix_adjust(args: argparse.Namespace) -> int:
    started = _now()
    conf = _load_yaml(args.config)
    controller_conf = conf.get("controller") or {}
    seed = _resolve(args.seed, _env_default("SEED", int), conf.get("seed"), default=0)
    max_epochs = _resolve(args.max_epochs, controller_conf.get("max_epochs"), default=3)
    tolerance = _resolve(args.tolerance, controller_conf.get("tolerance"), default=0.1)
    factor = _resolve(args.factor, controller_conf.get("factor"), default=1.1)
    out_dir = Path(_resolve(args.out_dir, conf.get("out_dir"), default="mix-adjust-run"))
    out_dir.mkdir(parents=True, exist_ok=True)

    try:
        coarse_doc = json.loads(Path(args.coarse_result).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read coarse result {args.coarse_result}: {exc}")
    coarse = coarse_result_from_dict(coarse_doc)

    pools = _load_pools(conf)
    oracle = _build_oracle(conf)
    trajectory_path = out_dir / "trajectory.jsonl"
    trajectory = run_loop(
        oracle, coarse, pools,
        max_epochs=int(max_epochs), tolerance=float(tolerance),
        factor=float(factor), seed=int(seed), workdir=out_dir,
        out_path=trajectory_path, coarse_ref=str(args.coarse_result),
    )
    for record in trajectory.epochs:
        print(f"epoch {record.epoch}: counts {record.counts} "
              f"ratio {record.ratio:.6g} -> {record.action}")
    print(f"trajectory written to {trajectory_path}")

    pool_paths = [conf["pools"][k] for k in ("d1", "d2", "d3")]
    _write_run_record(
        "mix-adjust",
        {"seed": int(seed), "max_epochs": int(max_epochs),
         "tolerance": float(tolerance), "factor": float(factor),
         "out_dir": str(out_dir)},
        [args.config, args.coarse_result, *pool_paths], [trajectory_path],
        seed=int(seed), started=started,
        record_path=out_dir / "runrecord.json",
    )
    return 0


# Parser ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="iqmix",
        description="Image-quality rating conversions, logit scoring, IQA "
                    "evaluation, and data-mixture optimization.",
    )
    parser.add_argument("--version", action="version", version=f"iqmix {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("convert", help="convert a MOS file into scoring QA pairs")
    p.add_argument("mos_file")
    p.add_argument("--scale-min", type=float, required=True,
                   help="lowest score of the dataset scale")
    p.add_argument("--scale-max", type=float, required=True,
                   help="highest score of the dataset scale")
    p.add_argument("--delimiter", default=",")
    p.add_argument("--lenient", action="store_true",
                   help="skip malformed/out-of-scale rows instead of aborting")
    p.add_argument("--inline-system", action="store_true",
                   help="prepend the system prefix to the question text")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("score", help="score level-logit records")
    p.add_argument("logits_file")
    p.add_argument("--mode", choices=["five-level", "binary"], default="five-level")
    p.add_argument("--strict", action="store_true",
                   help="abort on the first malformed record")
    p.add_argument("--rescale", type=float, nargs=2, metavar=("MIN", "MAX"),
                   help="affinely rescale five-level scores onto [MIN, MAX]")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("eval-iqa", help="SRCC/PLCC of scores against MOS")
    p.add_argument("scores_file")
    p.add_argument("mos_file")
    p.add_argument("--delimiter", default=",")
    p.add_argument("--logistic", action="store_true",
                   help="apply the four-parameter logistic pre-mapping to PLCC")
    p.add_argument("--format", choices=["text", "json"],
                   default=_env_default("FORMAT", str, "text"))
    p.set_defaults(func=cmd_eval_iqa)

    p = sub.add_parser("eval-mcq", help="multiple-choice accuracy report")
    p.add_argument("answers_file")
    p.add_argument("--format", choices=["text", "json"],
                   default=_env_default("FORMAT", str, "text"))
    p.set_defaults(func=cmd_eval_mcq)

    p = sub.add_parser("eval-desc", help="description-rating report")
    p.add_argument("ratings_file")
    p.add_argument("--format", choices=["text", "json"],
                   default=_env_default("FORMAT", str, "text"))
    p.set_defaults(func=cmd_eval_desc)

    p = sub.add_parser("subsample", help="balance a MOS distribution by subsampling")
    p.add_argument("mos_file")
    p.add_argument("--target", type=int, required=True)
    p.add_argument("--bins", type=int, default=10)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--delimiter", default=",")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_subsample)

    p = sub.add_parser("sample", help="sample a training manifest from pools")
    p.add_argument("--config", required=True, help="YAML config with pools paths")
    p.add_argument("--counts", help="explicit d1:d2:d3 counts")
    p.add_argument("--ratio", help="d1:d2:d3 ratio scaled to the full D1 pool")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--with-replacement", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("mix-search", help="coarse-grained optimal mix ratio search")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--repeats", type=int, default=None)
    p.add_argument("--jobs", type=int, default=None,
                   help="max concurrent oracle invocations during sweeps")
    p.add_argument("--out-dir", default=None)
    p.set_defaults(func=cmd_mix_search)

    p = sub.add_parser("mix-adjust", help="fine-grained per-epoch mix adjustment")
    p.add_argument("--config", required=True)
    p.add_argument("--coarse-result", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--max-epochs", type=int, default=None)
    p.add_argument("--tolerance", type=float, default=None)
    p.add_argument("--factor", type=float, default=None)
    p.add_argument("--out-dir", default=None)
    p.set_defaults(func=cmd_mix_adjust)

    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO, format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except OracleError as exc:
        print(f"oracle error: {exc}", file=sys.stderr)
        return 3
    except (DataError, IqmixError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
