import itertools

import numpy as np
import pytest

from popattn import synthetic
from popattn.analysis import (PREPOSITIONS, PRONOUNS, _hartigan, _lloyd, export_attention, kmeans, load_stoplist,
                              pickout_clustering, popularity_heatmap, text_stats, unpopular_ratio, write_jsonl)
from popattn.dataset import LabeledExample
from popattn.errors import InvalidInputError
from popattn.model import DualAttentionModel, ModelConfig
from popattn.pipeline import prepare
from popattn.train import TrainConfig, train

from conftest import TINY, tiny_envs, tiny_examples


def brute_force_inertia(points, K=2):
    """Optimal K=2 inertia over every split of the points into two nonempty groups."""
    n = len(points)
    best = np.inf
    for mask in itertools.product([0, 1], repeat=n):
        m = np.array(mask, dtype=bool)
        if m.all() or not m.any():
            continue
        sse = sum(np.sum((points[g] - points[g].mean(axis=0)) ** 2) for g in (m, ~m))
        best = min(best, sse)
    return best


def assert_monotone(history):
    for a, b in zip(history, history[1:]):
        assert b <= a * (1 + 1e-12) + 1e-12


class TestKMeans:
    def test_two_blobs(self, rng):
        a = rng.uniform(-1, 1, size=(20, 2))
        b = rng.uniform(-1, 1, size=(20, 2)) + 10
        result = kmeans(np.vstack([a, b]), 2, seed=0)
        labels = result.assignment
        assert len(set(labels[:20])) == 1 and len(set(labels[20:])) == 1 and labels[0] != labels[20]

    def test_k_equals_n(self, rng):
        pts = rng.normal(size=(5, 3))
        result = kmeans(pts, 5, seed=1)
        assert result.inertia == 0.0 and sorted(result.assignment) == [0, 1, 2, 3, 4]

    def test_duplicate_points_k_equals_n(self):
        result = kmeans(np.zeros((3, 2)), 3, seed=0)
        assert result.inertia == 0.0

    @pytest.mark.parametrize("seed", range(10))
    def test_six_points_match_exhaustive(self, seed):
        pts = np.random.default_rng(seed).normal(size=(6, 2))
        result = kmeans(pts, 2, seed=seed)
        assert result.inertia == pytest.approx(brute_force_inertia(pts), rel=1e-9, abs=1e-12)

    def test_inertia_non_increasing_every_run(self, rng):
        pts = np.vstack([rng.normal(loc=c, size=(30, 4)) for c in (0, 3, 6)])
        result = kmeans(pts, 5, seed=2, n_init=5)
        assert len(result.run_histories) == 5
        for history in result.run_histories:
            assert_monotone(history)

    def test_empty_cluster_reseeded(self):
        # the third centre starts far from every point, so its cluster is empty after the first assignment
        pts = np.array([[0.0], [1.0], [10.0], [13.0]])
        assignment, centroids, history = _lloyd(pts, np.array([[0.5], [11.5], [100.0]]), 300)
        assert len(set(assignment)) == 3
        assert history[0] == pytest.approx(0.5 + 4.5) and history[-1] == pytest.approx(0.5)
        assert_monotone(history)

    def test_refinement_escapes_lloyd_fixpoint(self):
        # {0, 2, 3} | {5} is stable under Lloyd (3 is nearer 5/3 than 5) but moving 3 over
        # gives {0, 2} | {3, 5} with inertia 2 + 2
        pts = np.array([[0.0], [2.0], [3.0], [5.0]])
        assignment, _, _ = _lloyd(pts, np.array([[5 / 3], [5.0]]), 300)
        assert list(assignment) == [0, 0, 0, 1]
        refined, history = _hartigan(pts, assignment, 2, 300)
        assert list(refined) == [0, 0, 1, 1] and history == [pytest.approx(4.0)]

    def test_rejects_too_few_points(self):
        with pytest.raises(InvalidInputError):
            kmeans(np.zeros((2, 2)), 3)

    def test_deterministic(self, rng):
        pts = rng.normal(size=(40, 3))
        a, b = kmeans(pts, 4, seed=9), kmeans(pts, 4, seed=9)
        assert np.array_equal(a.assignment, b.assignment) and a.history == b.history


def _labeled(features, labels):
    return [LabeledExample("u", f"p{i:03d}", [2], np.asarray(f, dtype=np.float32), int(y), "")
            for i, (f, y) in enumerate(zip(features, labels))]


class TestPickout:
    def test_all_positive(self, rng):
        report = pickout_clustering(_labeled(rng.normal(size=(10, 2)), [1] * 10), K=2, t=0.1, seed=0)
        assert report.k_per_round == [2]
        assert [c.ratio for c in report.categories] == [0.0, 0.0]
        assert all(c.picked_out_at_round == 1 for c in report.categories)

    def test_ratio(self):
        assert unpopular_ratio([0, 0, 0, 1]) == 0.75

    def test_partition_and_termination(self, rng):
        examples = _labeled(rng.normal(size=(60, 3)), rng.integers(0, 2, size=60))
        report = pickout_clustering(examples, K=4, t=0.05, seed=3)
        members = [m for c in report.categories for m in c.members]
        assert sorted(members) == sorted(e.key for e in examples)
        assert len(report.k_per_round) <= len(examples)
        assert all(0.0 <= c.ratio <= 1.0 for c in report.categories)

    def test_separates_planted_groups(self, rng):
        pos = rng.normal(size=(20, 2)) + 10
        mixed = rng.normal(size=(20, 2))
        labels = [1] * 20 + [0, 1] * 10
        report = pickout_clustering(_labeled(np.vstack([pos, mixed]), labels), K=2, t=0.2, seed=0)
        picked = [c for c in report.categories if c.picked_out_at_round == 1]
        assert len(picked) == 1 and picked[0].ratio == 0.0 and len(picked[0].members) == 20

    def test_bad_threshold(self, rng):
        with pytest.raises(InvalidInputError):
            pickout_clustering(_labeled(rng.normal(size=(4, 2)), [0, 1, 0, 1]), K=2, t=0.5)

    def test_csv_has_every_member(self, rng):
        examples = _labeled(rng.normal(size=(12, 2)), [0, 1] * 6)
        text = pickout_clustering(examples, K=3, t=0.1, seed=1).to_csv()
        assert len(text.splitlines()) == 13


def _captioned(pairs):
    return [LabeledExample("u", f"p{i}", [], np.zeros(1), y, c) for i, (c, y) in enumerate(pairs)]


class TestTextStats:
    def test_score_arithmetic(self):
        data = [("cake cake cake", 1), ("cake cake", 1), ("cake cake", 0)]
        report = text_stats(_captioned(data))
        stat = report.words[0]
        assert (stat.token, stat.m_p, stat.m_n, stat.score) == ("cake", 5, 2, 3)

    def test_stoplist(self):
        report = text_stats(_captioned([("my chicago cake , !", 1)]), extra_stopwords=["Chicago"])
        assert [s.token for s in report.words] == ["cake"]

    def test_builtin_classes(self):
        assert {"my", "they"} <= PRONOUNS and {"in", "with"} <= PREPOSITIONS

    def test_symmetric_corpus(self):
        captions = ["sun fun 🙂", "rain", "sun"]
        report = text_stats(_captioned([(c, 1) for c in captions] + [(c, 0) for c in captions]))
        assert all(s.score == 0 for s in report.words + report.emojis)

    def test_swapped_labels_negate(self, rng):
        words = ["a1", "b2", "c3", "🙂", "🎉", "d4"]
        data = [(" ".join(rng.choice(words, size=4)), int(rng.integers(2))) for _ in range(30)]
        report = text_stats(_captioned(data))
        swapped = text_stats(_captioned([(c, 1 - y) for c, y in data]))
        for s in report.words + report.emojis:
            assert swapped.score_of(s.token) == -s.score

    def test_emoji_section_and_ranking(self):
        data = [("b a 🙂", 1), ("a 🎉", 1), ("c", 0)]
        report = text_stats(_captioned(data))
        assert [s.token for s in report.words] == ["a", "b", "c"]
        assert [s.token for s in report.emojis] == ["🎉", "🙂"]

    def test_load_stoplist(self, tmp_path):
        path = tmp_path / "stop.txt"
        path.write_text("# comment line\nUSCevents\n#\n#tbt\n\n")
        assert load_stoplist(path) == {"uscevents", "#tbt"}


class TestAttentionExport:
    def test_single_token_and_normalization(self, rng):
        cfg = ModelConfig.for_variant("dual", **TINY)
        model = DualAttentionModel(cfg, seed=0)
        examples = tiny_examples(rng, n=5)
        examples[0].token_ids = [3]
        records = export_attention(model, examples, tiny_envs(rng))
        assert records[0].weights == [1.0]
        for r in records:
            assert abs(sum(r.weights) - 1) < 1e-6 and 0 < r.probability < 1

    def test_deterministic(self, rng, tmp_path):
        cfg = ModelConfig.for_variant("e-attn", **TINY)
        examples = tiny_examples(rng, n=4)
        for name in ("a", "b"):
            write_jsonl(tmp_path / name, export_attention(DualAttentionModel(cfg, seed=2), examples, None))
        assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()

    def test_rejects_variant_without_attention(self, rng):
        model = DualAttentionModel(ModelConfig.for_variant("early", **TINY))
        with pytest.raises(InvalidInputError):
            export_attention(model, tiny_examples(rng), None)

    def test_planted_token_draws_attention(self):
        posts = synthetic.planted_signal_corpus(n_users=40, posts_per_user=20, d1=8, seed=2)
        prep = prepare(posts, seed=0)
        cfg = ModelConfig.for_variant("e-attn", d1=8, vocab_size=len(prep.vocab), topics=2,
                                      d2=16, k=8, d_env=4, d_fuse=16)
        model = DualAttentionModel(cfg, seed=0)
        train(model, prep.subset("train"), prep.subset("val"), None, TrainConfig(batch_size=32, epochs=6))
        planted, other = [], []
        for r in export_attention(model, prep.subset("test"), None, prep.vocab):
            for tok, w in zip(r.tokens, r.weights):
                (planted if tok == synthetic.SIGNAL_TOKEN else other).append(w)
        assert planted and np.mean(planted) > np.mean(other)


class TestHeatmap:
    def test_constant_grid(self, rng):
        cfg = ModelConfig.for_variant("dual", **TINY)
        model = DualAttentionModel(cfg, seed=0)
        example = tiny_examples(rng, n=1)[0]
        cell = rng.normal(size=cfg.d1)
        heat = popularity_heatmap(model, example, np.tile(cell, (7, 7, 1)), tiny_envs(rng))
        assert heat.grid.shape == (7, 7) and np.all(heat.grid == heat.grid[0, 0])
        assert np.all((heat.grid > 0) & (heat.grid < 1))

    def test_zero_model(self, rng):
        cfg = ModelConfig.for_variant("dual", **TINY)
        model = DualAttentionModel(cfg, seed=0)
        for p in model.parameters():
            p.data[...] = 0
        heat = popularity_heatmap(model, tiny_examples(rng, n=1)[0], rng.normal(size=(7, 7, cfg.d1)), None)
        assert np.all(heat.grid == 0.5)

    def test_cells_vary(self, rng):
        cfg = ModelConfig.for_variant("dual", **TINY)
        model = DualAttentionModel(cfg, seed=0)
        heat = popularity_heatmap(model, tiny_examples(rng, n=1)[0], rng.normal(size=(7, 7, cfg.d1)), None)
        assert np.unique(heat.grid).size > 1

    def test_missing_spatial(self, rng):
        model = DualAttentionModel(ModelConfig.for_variant("dual", **TINY))
        with pytest.raises(InvalidInputError):
            popularity_heatmap(model, tiny_examples(rng, n=1)[0], None, None)
