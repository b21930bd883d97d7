import copy

import numpy as np
import pytest

from anticipation.datagen import (
    MODALITY_SHAPES,
    allocate_counts,
    generate,
    label_frequencies,
    load_dataset,
    stack_flow_snippets,
    stack_flow_snippets_array,
    window,
    write_dataset,
)
from anticipation.errors import ConfigError, DataError
from anticipation.model import OBSERVED_FRAMES, TOTAL_FRAMES

SMALL = {"train": 24, "val": 12, "test": 12}


@pytest.fixture(scope="module")
def default_data():
    return generate(42)


@pytest.fixture(scope="module")
def small_data():
    return generate(3, sizes=SMALL)


class TestGenerate:
    def test_same_seed_identical(self):
        a, b = generate(5, sizes=SMALL), generate(5, sizes=SMALL)
        assert a.manifest.to_json() == b.manifest.to_json()
        for split in SMALL:
            for m, arr in a.split(split).frames.items():
                assert arr.tobytes() == b.split(split).frames[m].tobytes()

    def test_different_seed_differs(self):
        a, b = generate(5, sizes=SMALL), generate(6, sizes=SMALL)
        assert not np.array_equal(a.split("train").frames["rgb"], b.split("train").frames["rgb"])

    def test_shapes(self, small_data):
        for m in ("rgb", "flow", "obj", "masked_rgb"):
            assert small_data.split("val").frames[m].shape == (12, TOTAL_FRAMES) + MODALITY_SHAPES[m]
        snippets = small_data.clips("val", [0, 1], "flow_snippets", OBSERVED_FRAMES)
        assert snippets.shape == (2, OBSERVED_FRAMES, 10, 16, 16)

    def test_labels_follow_table(self, default_data):
        table = default_data.manifest.action_table
        for split in ("train", "val", "test"):
            s = default_data.split(split)
            for a, v, n in zip(s.action, s.verb, s.noun):
                assert tuple(table[a]) == (v, n)

    def test_table_distinct_and_covering(self, default_data):
        table = [tuple(p) for p in default_data.manifest.action_table]
        assert len(set(table)) == 12
        assert {v for v, _ in table} == set(range(6))
        assert {n for _, n in table} == set(range(8))

    def test_zipf_imbalance(self, default_data):
        c = np.asarray(default_data.manifest.counts["train"]["action"])
        assert c.sum() == 1200 and c.max() / c.min() > 5

    def test_zipf_zero_near_uniform(self):
        d = generate(42, sizes={"train": 1200, "val": 12, "test": 12}, zipf=0.0)
        c = np.asarray(d.manifest.counts["train"]["action"])
        assert c.max() / c.min() < 1.5

    def test_masked_rgb_is_masked(self, small_data):
        s = small_data.split("train")
        rgb, masked = s.frames["rgb"], s.frames["masked_rgb"]
        kept = masked != 0
        np.testing.assert_array_equal(masked[kept], rgb[kept])
        frac = kept.mean()
        assert 0.2 < frac < 0.6

    def test_obj_scores_are_distributions(self, small_data):
        obj = small_data.split("train").frames["obj"]
        np.testing.assert_allclose(obj.sum(-1), 1.0, atol=1e-5)

    def test_values_bounded(self, small_data):
        rgb = small_data.split("train").frames["rgb"]
        assert rgb.min() >= -1 and rgb.max() <= 1

    @pytest.mark.parametrize("kw", [dict(n_actions=49), dict(sizes={"train": 5, "val": 12, "test": 12}),
                                    dict(sizes={"dev": 20}), dict(action_probs=[1.0] * 3)])
    def test_rejects(self, kw):
        with pytest.raises(ConfigError):
            generate(0, **kw)

    def test_linear_probe_beats_chance(self, default_data):
        def features(split):
            x = default_data.split(split).frames["rgb"][:, :OBSERVED_FRAMES].mean(axis=1)
            return np.concatenate([x.reshape(len(x), -1), np.ones((len(x), 1))], axis=1)

        X, y = features("train"), default_data.split("train").action
        Y = np.eye(12)[y]
        W = np.linalg.solve(X.T @ X + 10.0 * np.eye(X.shape[1]), X.T @ Y)
        acc = np.mean(np.argmax(features("test") @ W, axis=1) == default_data.split("test").action)
        assert acc > 2 / 12


class TestAllocation:
    def test_sums_and_minimum(self):
        c = allocate_counts(100, np.array([0.7, 0.2, 0.1, 0.0]))
        assert c.sum() == 100 and c.min() >= 1

    def test_too_small(self):
        with pytest.raises(ConfigError):
            allocate_counts(3, np.ones(4))


class TestWindow:
    def test_lengths(self, small_data):
        sample = small_data.sample("train", 0)
        assert all(len(v) == OBSERVED_FRAMES for v in window(sample, "ordinary").values())
        assert all(len(v) == TOTAL_FRAMES for v in window(sample, "warmup").values())

    @pytest.mark.parametrize("phase", ["warmup", "ordinary", "finetune", "eval"])
    def test_prefix(self, small_data, phase):
        sample = small_data.sample("val", 3)
        w = window(sample, phase)
        for m in ("rgb", "flow", "obj", "masked_rgb"):
            np.testing.assert_array_equal(w[m], sample.frames[m][:len(w[m])])

    def test_counter_sees_gap_reads(self, small_data):
        small_data.reads.reset()
        window(small_data.sample("train", 1), "finetune")
        assert small_data.reads.withheld_reads == 0
        window(small_data.sample("train", 1), "warmup")
        assert small_data.reads.withheld_reads > 0
        small_data.reads.reset()
        small_data.clips("train", [0, 1, 2], "rgb", TOTAL_FRAMES)
        assert small_data.reads.withheld_reads == 3 * (TOTAL_FRAMES - OBSERVED_FRAMES)


class TestSnippets:
    def frames(self, n, rng):
        return [rng.normal(size=(2, 3, 3)) for _ in range(n)]

    def test_constant_sequence(self):
        f = np.full((2, 3, 3), 0.25)
        for s in stack_flow_snippets([f] * 4):
            np.testing.assert_array_equal(s, np.concatenate([f] * 5))

    def test_first_position_repeats(self, rng):
        fr = self.frames(3, rng)
        np.testing.assert_array_equal(stack_flow_snippets(fr)[0], np.concatenate([fr[0]] * 5))

    def test_sixth_position(self, rng):
        fr = self.frames(6, rng)
        out = stack_flow_snippets(fr)
        assert len(out) == 6 and out[5].shape == (10, 3, 3)
        np.testing.assert_array_equal(out[5], np.concatenate(fr[1:6]))

    def test_third_position(self, rng):
        fr = self.frames(4, rng)
        np.testing.assert_array_equal(stack_flow_snippets(fr)[2], np.concatenate([fr[0]] * 3 + fr[1:3]))

    def test_vectorised_agrees(self, rng):
        flow = rng.normal(size=(3, 7, 2, 4, 4))
        vec = stack_flow_snippets_array(flow)
        for b in range(3):
            np.testing.assert_array_equal(vec[b], np.stack(stack_flow_snippets(list(flow[b]))))

    def test_empty(self):
        with pytest.raises(DataError):
            stack_flow_snippets([])


class TestFrequencies:
    @pytest.mark.parametrize("split", ["train", "val", "test"])
    def test_partition(self, default_data, split):
        c = label_frequencies(default_data.manifest, split)
        for task in ("verb", "noun", "action"):
            assert c[task].sum() == default_data.manifest.sizes[split]

    def test_recount(self, default_data):
        c = label_frequencies(default_data.manifest, "train")
        s = default_data.split("train")
        for task, labels, n in (("verb", s.verb, 6), ("noun", s.noun, 8), ("action", s.action, 12)):
            recount = [sum(1 for l in labels if l == k) for k in range(n)]
            assert c[task].tolist() == recount

    def test_single_class(self):
        d = generate(0, sizes={"train": 4, "val": 4, "test": 4}, n_verbs=1, n_nouns=1, n_actions=1)
        assert label_frequencies(d.manifest, "train")["action"].tolist() == [4]

    def test_unknown_split(self, small_data):
        with pytest.raises(ConfigError):
            label_frequencies(small_data.manifest, "dev")

    def test_inconsistent_counts(self, small_data):
        m = copy.deepcopy(small_data.manifest)
        m.counts["train"]["verb"][0] += 1
        with pytest.raises(DataError):
            label_frequencies(m, "train")


class TestFiles:
    def test_round_trip(self, tmp_path, small_data):
        write_dataset(small_data, tmp_path)
        assert (tmp_path / "manifest.json").exists()
        assert (tmp_path / "train" / "train_00000.rgb.tns").exists()
        back = load_dataset(tmp_path)
        assert back.manifest.to_json() == small_data.manifest.to_json()
        for split in SMALL:
            for m, arr in small_data.split(split).frames.items():
                assert back.split(split).frames[m].tobytes() == arr.tobytes()
            np.testing.assert_array_equal(back.split(split).action, small_data.split(split).action)

    def test_partial_load(self, tmp_path, small_data):
        write_dataset(small_data, tmp_path)
        back = load_dataset(tmp_path, modalities=["flow_snippets"], splits=["val"])
        assert set(back.splits) == {"val"}
        assert set(back.split("val").frames) == {"flow"}

    def test_missing(self, tmp_path):
        with pytest.raises(DataError):
            load_dataset(tmp_path / "nowhere")
