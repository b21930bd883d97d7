import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from anticipation.errors import ConfigError, ContractError, DataError
from anticipation.evalkit import (
    FusionSpec,
    ScoreSet,
    ensemble_report,
    format_report,
    fuse,
    load_scoreset,
    mt5r,
    report_csv,
    save_scoreset,
    topk_membership,
    topk_recall_per_class,
)


def brute_recall(scores, labels, k):
    """Rank classes by (-score, index) with a plain sort and count hits per class."""
    per_class = {}
    for row, y in zip(scores, labels):
        ranked = sorted(range(len(row)), key=lambda c: (-row[c], c))
        per_class.setdefault(int(y), []).append(y in ranked[:k])
    return {c: sum(h) / len(h) for c, h in per_class.items()}


def brute_mt5r(scores, labels, k=5):
    r = brute_recall(scores, labels, k)
    return sum(r.values()) / len(r)


def make_set(model_id, scores, modality="rgb", ids=None):
    n = len(next(iter(scores.values())))
    return ScoreSet(model_id, modality, ids or [f"s{i}" for i in range(n)], scores)


def random_scores(rng, n, c):
    raw = rng.random((n, c))
    return raw / raw.sum(1, keepdims=True)


class TestTopK:
    def test_perfect_scores(self):
        labels = np.array([0, 1, 2, 2, 5])
        scores = np.eye(6)[labels]
        assert topk_recall_per_class(scores, labels, 1) == {0: 1.0, 1: 1.0, 2: 1.0, 5: 1.0}

    def test_saturation(self, rng):
        labels = rng.integers(0, 4, 30)
        r = topk_recall_per_class(rng.random((30, 4)), labels, 5)
        assert all(v == 1.0 for v in r.values())

    def test_three_classes_k1(self):
        scores = np.array([[0.6, 0.3, 0.1], [0.2, 0.5, 0.3], [0.4, 0.4, 0.2], [0.1, 0.1, 0.8]])
        labels = np.array([0, 0, 1, 2])
        # sample 2 ties 0.4/0.4: class 0 ranks first, so the class-1 instance misses
        assert topk_recall_per_class(scores, labels, 1) == {0: 0.5, 1: 0.0, 2: 1.0}
        assert topk_recall_per_class(scores, labels, 1) == brute_recall(scores, labels, 1)

    def test_tie_prefers_lower_index(self):
        scores = np.full((1, 8), 0.125)
        assert topk_membership(scores, np.array([4]), 5)[0]
        assert not topk_membership(scores, np.array([5]), 5)[0]

    def test_absent_classes_excluded(self):
        r = topk_recall_per_class(np.eye(10)[[1, 3]], np.array([1, 3]), 5)
        assert set(r) == {1, 3}

    def test_bad_inputs(self):
        with pytest.raises(ConfigError):
            topk_membership(np.eye(3), np.array([0, 1, 2]), 0)
        with pytest.raises(DataError):
            topk_membership(np.eye(3), np.array([0, 1, 3]), 1)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 100_000), st.integers(1, 12), st.integers(1, 40), st.integers(1, 6))
    def test_matches_brute_force(self, seed, C, n, k):
        r = np.random.default_rng(seed)
        # coarse values force frequent ties
        scores = r.integers(0, 4, (n, C)).astype(float)
        labels = r.integers(0, C, n)
        assert topk_recall_per_class(scores, labels, k) == brute_recall(scores, labels, k)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 100_000))
    def test_monotone_transform_invariance(self, seed):
        r = np.random.default_rng(seed)
        scores = r.random((20, 9))
        labels = r.integers(0, 9, 20)
        a = topk_membership(scores, labels, 5)
        b = topk_membership(np.exp(3 * scores) - 7, labels, 5)
        np.testing.assert_array_equal(a, b)


class TestMt5r:
    def test_hand_table(self):
        scores = np.array([[0.9, 0.1], [0.3, 0.7], [0.2, 0.8]])
        labels = np.array([0, 0, 1])
        # class 0 recall 1/2, class 1 recall 1
        assert mt5r(scores, labels, k=1) == pytest.approx(0.75, abs=1e-12)

    def test_single_class(self, rng):
        scores = random_scores(rng, 20, 10)
        labels = np.full(20, 3)
        assert mt5r(scores, labels) == topk_recall_per_class(scores, labels)[3]

    def test_empty(self):
        with pytest.raises(ContractError):
            mt5r(np.zeros((0, 3)), np.array([], dtype=int))

    def test_k_equals_classes(self, rng):
        assert mt5r(random_scores(rng, 50, 7), rng.integers(0, 7, 50), k=7) == 1.0

    def test_monte_carlo_uniform(self, rng):
        C, n = 20, 10_000
        labels = rng.integers(0, C, n)
        value = mt5r(rng.random((n, C)), labels)
        p = 5 / C
        sigma = np.sqrt(p * (1 - p) / n)
        assert abs(value - p) < 3 * sigma

    def test_sample_permutation_invariance(self, rng):
        scores, labels = random_scores(rng, 40, 9), rng.integers(0, 9, 40)
        perm = rng.permutation(40)
        assert mt5r(scores, labels) == pytest.approx(mt5r(scores[perm], labels[perm]), abs=1e-15)

    @pytest.mark.parametrize("seed", range(10))
    def test_brute_force(self, seed):
        r = np.random.default_rng(seed)
        scores = random_scores(r, 60, 12)
        labels = r.integers(0, 12, 60)
        assert abs(mt5r(scores, labels) - brute_mt5r(scores, labels)) < 1e-12


class TestFuse:
    def test_singleton(self, rng):
        s = make_set("a", {"action": random_scores(rng, 5, 4)})
        out = fuse([s], FusionSpec([("a", 3.7)]))
        np.testing.assert_allclose(out.scores["action"], s.scores["action"], atol=1e-12)

    def test_identical_models(self, rng):
        sc = random_scores(rng, 5, 4)
        out = fuse([make_set(n, {"verb": sc}) for n in "abc"])
        np.testing.assert_allclose(out.scores["verb"], sc, atol=1e-12)

    def test_weighted_hand_value(self):
        a = make_set("rgb_model", {"action": np.array([[0.8, 0.2]])}, "rgb")
        b = make_set("flow_model", {"action": np.array([[0.3, 0.7]])}, "flow")
        spec = FusionSpec.modality_weighted([a, b])
        assert spec.weights == [("rgb_model", 1.2), ("flow_model", 1.0)]
        out = fuse([a, b], spec)
        expected = np.array([[1.2 * 0.8 + 0.3, 1.2 * 0.2 + 0.7]]) / 2.2
        np.testing.assert_allclose(out.scores["action"], expected, rtol=1e-12)
        assert out.constituents == ["rgb_model", "flow_model"]
        assert out.modality == "mixed"

    def test_global_rescale_invariance(self, rng):
        sets = [make_set(n, {"noun": random_scores(rng, 6, 5)}) for n in "ab"]
        w1 = fuse(sets, FusionSpec([("a", 1.2), ("b", 0.5)])).scores["noun"]
        w2 = fuse(sets, FusionSpec([("a", 12.0), ("b", 5.0)])).scores["noun"]
        np.testing.assert_allclose(w1, w2, atol=1e-12)

    def test_rows_normalised(self, rng):
        sets = [make_set(n, {"noun": random_scores(rng, 6, 5)}) for n in "ab"]
        out = fuse(sets, FusionSpec([("a", 2.0), ("b", 0.3)]))
        out.check_normalized()

    def test_misaligned(self, rng):
        a = make_set("a", {"verb": random_scores(rng, 3, 2)}, ids=["x", "y", "z"])
        b = make_set("b", {"verb": random_scores(rng, 3, 2)}, ids=["x", "q", "z"])
        with pytest.raises(DataError, match="'q'"):
            fuse([a, b])

    def test_nonpositive_weight(self, rng):
        a = make_set("a", {"verb": random_scores(rng, 3, 2)})
        with pytest.raises(ConfigError):
            fuse([a], FusionSpec([("a", 0.0)]))

    def test_empty(self):
        with pytest.raises(ContractError):
            fuse([])


class TestScoreSet:
    def test_shape_checked(self):
        with pytest.raises(DataError):
            ScoreSet("a", "rgb", ["s0"], {"verb": np.ones((2, 3)) / 3})

    def test_normalisation_checked(self):
        with pytest.raises(DataError):
            make_set("a", {"verb": np.ones((2, 3))}).check_normalized()

    def test_file_round_trip(self, tmp_path, rng):
        s = ScoreSet("m1", "flow", ["a", "b", "c"],
                     {t: random_scores(rng, 3, c).astype(np.float32) for t, c in
                      (("verb", 6), ("noun", 8), ("action", 12))}, ["x", "y"])
        save_scoreset(s, tmp_path / "m1.scores")
        back = load_scoreset(tmp_path / "m1.scores")
        assert (back.model_id, back.modality, back.sample_ids, back.constituents) == \
            ("m1", "flow", ["a", "b", "c"], ["x", "y"])
        for t in s.scores:
            assert back.scores[t].tobytes() == s.scores[t].tobytes()

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError):
            load_scoreset(tmp_path / "none.scores")


class TestReport:
    @pytest.fixture
    def sets(self, rng):
        return [make_set(n, {t: random_scores(rng, 40, c) for t, c in (("verb", 6), ("noun", 8), ("action", 12))},
                         mod) for n, mod in (("h_rgb", "rgb"), ("h_flow", "flow"), ("m_rgb", "rgb"))]

    @pytest.fixture
    def labels(self, rng):
        return {"verb": rng.integers(0, 6, 40), "noun": rng.integers(0, 8, 40), "action": rng.integers(0, 12, 40)}

    def test_single_spec_is_mt5r_of_fusion(self, sets, labels):
        rows = ensemble_report(sets, {"solo": (["h_flow"], None)}, labels)
        assert rows[0].mt5r["action"] == mt5r(sets[1].scores["action"], labels["action"])

    def test_recompute(self, sets, labels):
        weighted = FusionSpec.modality_weighted(sets)
        rows = ensemble_report(sets, {"all": (["h_rgb", "h_flow", "m_rgb"], None),
                                      "all_w": (["h_rgb", "h_flow", "m_rgb"], weighted)}, labels)
        w = np.array([1.2, 1.0, 1.2])
        for row, weights in zip(rows, (np.ones(3), w)):
            for task in ("verb", "noun", "action"):
                acc = sum(wi * s.scores[task] for wi, s in zip(weights, sets))
                fused = acc / acc.sum(1, keepdims=True)
                assert abs(row.mt5r[task] - brute_mt5r(fused, labels[task])) < 1e-12

    def test_duplicate_member(self, sets, labels):
        a = ensemble_report(sets, {"x": (["h_rgb"], None)}, labels)[0]
        b = ensemble_report(sets + [make_set("h_rgb_copy", sets[0].scores)],
                            {"x": (["h_rgb", "h_rgb_copy"], None)}, labels)[0]
        assert a.mt5r == b.mt5r

    def test_unknown_member(self, sets, labels):
        with pytest.raises(DataError):
            ensemble_report(sets, {"x": (["nope"], None)}, labels)

    def test_formats(self, sets, labels):
        rows = ensemble_report(sets, {"pair": (["h_rgb", "m_rgb"], None)}, labels)
        text = format_report(rows)
        assert text.splitlines()[0].split() == ["fusion", "verb", "noun", "action"]
        csv_lines = report_csv(rows).splitlines()
        assert csv_lines[0] == "fusion,members,mt5r_verb,mt5r_noun,mt5r_action"
        assert csv_lines[1].startswith("pair,h_rgb;m_rgb,")
        assert float(csv_lines[1].split(",")[-1]) == rows[0].mt5r["action"]
