import numpy as np
import pytest

from iqmix.errors import ConfigError, NormalizationError, ScoreOutOfRangeError
from iqmix.levels import (
    FIVE_LEVEL_LABELS,
    FrequencyVector,
    LevelScale,
    RatingLevel,
    level_to_score,
    mos_from_frequencies,
    quantize_scores,
    score_to_level,
)


@pytest.fixture
def scale15() -> LevelScale:
    return LevelScale(1.0, 5.0)


class TestScoreToLevel:
    @pytest.mark.parametrize(
        "score,label",
        [
            (3.0, "fair"),
            (5.0, "excellent"),
            (1.0, "bad"),  # range minimum assigned to the first level
            (4.2, "good"),  # closed upper edge of interval 4
            (1.8, "bad"),
            (2.6, "poor"),
            (3.4, "fair"),
        ],
    )
    def test_examples(self, scale15, score, label):
        assert score_to_level(score, scale15).label == label

    def test_just_above_edges(self, scale15):
        for i, edge in enumerate(scale15.interior_edges(), start=1):
            above = np.nextafter(edge, np.inf)
            assert score_to_level(above, scale15).index == i + 1

    @pytest.mark.parametrize("bad", [0.5, 5.5, float("nan"), float("inf")])
    def test_out_of_range(self, scale15, bad):
        with pytest.raises(ScoreOutOfRangeError) as exc:
            score_to_level(bad, scale15)
        assert repr(bad) in str(exc.value)

    def test_monotone(self, scale15):
        rng = np.random.default_rng(11)
        scores = np.sort(rng.uniform(1.0, 5.0, 500))
        indices = [score_to_level(s, scale15).index for s in scores]
        assert indices == sorted(indices)

    def test_vectorized_matches_scalar(self):
        scale = LevelScale(0.0, 100.0)
        rng = np.random.default_rng(3)
        scores = rng.uniform(0.0, 100.0, 1000)
        vec = quantize_scores(scores, scale)
        assert all(
            int(v) == score_to_level(float(s), scale).index
            for s, v in zip(scores, vec)
        )

    def test_vectorized_out_of_range(self):
        with pytest.raises(ScoreOutOfRangeError):
            quantize_scores([0.0, 120.0], LevelScale(0.0, 100.0))

    def test_two_level_scale(self):
        scale = LevelScale(0.0, 1.0, level_count=2)
        assert scale.labels == ("poor", "good")
        assert score_to_level(0.2, scale).label == "poor"
        assert score_to_level(0.5, scale).label == "poor"  # edge stays below
        assert score_to_level(0.7, scale).label == "good"


class TestLevelScale:
    def test_invalid_range(self):
        with pytest.raises(ConfigError):
            LevelScale(5.0, 5.0)
        with pytest.raises(ConfigError):
            LevelScale(5.0, 1.0)

    def test_invalid_count(self):
        with pytest.raises(ConfigError):
            LevelScale(0.0, 1.0, level_count=1)

    def test_bin_edges_strictly_increasing(self):
        for lo, hi in [(1.0, 5.0), (0.0, 100.0), (-3.0, 7.5)]:
            edges = LevelScale(lo, hi).bin_edges()
            assert len(edges) == 6
            assert all(a < b for a, b in zip(edges, edges[1:]))
            assert edges[0] == lo and edges[-1] == hi

    def test_five_labels(self):
        assert LevelScale(1, 5).labels == FIVE_LEVEL_LABELS
        assert [lv.index for lv in LevelScale(1, 5).levels] == [1, 2, 3, 4, 5]


class TestLevelToScore:
    @pytest.mark.parametrize("index,label,score", [(3, "fair", 3), (1, "bad", 1), (5, "excellent", 5)])
    def test_examples(self, index, label, score):
        assert level_to_score(RatingLevel(index, label)) == score

    def test_round_trip_is_step_function(self, scale15):
        grid = np.linspace(1.0, 5.0, 2001)
        steps = [level_to_score(score_to_level(float(s), scale15)) for s in grid]
        assert steps == sorted(steps)
        assert set(steps) == {1, 2, 3, 4, 5}
        # plateaus have equal width: interval i covers (edge_{i-1}, edge_i]
        edges = scale15.bin_edges()
        widths = {round(edges[i + 1] - edges[i], 12) for i in range(5)}
        assert widths == {0.8}


class TestMosFromFrequencies:
    def test_point_mass(self):
        assert mos_from_frequencies(FrequencyVector((0, 0, 1, 0, 0))) == 3.0

    def test_symmetry(self):
        assert mos_from_frequencies(FrequencyVector((0.5, 0, 0, 0, 0.5))) == 3.0

    def test_weighted(self):
        assert mos_from_frequencies(FrequencyVector((0, 0, 0.5, 0.5, 0))) == 3.5

    def test_rejects_counts_form(self):
        counts = FrequencyVector.from_counts((2, 0, 1, 0, 1))
        with pytest.raises(NormalizationError):
            mos_from_frequencies(counts)
        assert mos_from_frequencies(counts.as_normalized()) == pytest.approx(2.5)

    def test_rejects_bad_sum(self):
        with pytest.raises(NormalizationError) as exc:
            mos_from_frequencies(FrequencyVector((0.5, 0.1, 0, 0, 0.1)))
        assert "0.7" in str(exc.value)

    def test_rejects_negative(self):
        with pytest.raises(NormalizationError):
            FrequencyVector((-0.1, 0.4, 0.3, 0.2, 0.2))

    def test_affine_in_frequencies(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            f = rng.dirichlet(np.ones(5))
            g = rng.dirichlet(np.ones(5))
            a = float(rng.uniform())
            mixed = mos_from_frequencies(FrequencyVector(tuple(a * f + (1 - a) * g)))
            parts = a * mos_from_frequencies(FrequencyVector(tuple(f))) + (
                1 - a
            ) * mos_from_frequencies(FrequencyVector(tuple(g)))
            assert mixed == pytest.approx(parts, abs=1e-12)

    def test_range(self):
        rng = np.random.default_rng(6)
        for _ in range(100):
            f = rng.dirichlet(np.ones(5))
            assert 1.0 <= mos_from_frequencies(FrequencyVector(tuple(f))) <= 5.0
