import numpy as np
import pytest

from anticipation import tensor as T
from anticipation.errors import ConfigError, ContractError
from anticipation.model import (
    CELL_KINDS,
    OBJ_DIM,
    OBSERVED_FRAMES,
    TOTAL_FRAMES,
    AnticipationModel,
    ModelConfig,
    load_checkpoint,
    predict,
    save_checkpoint,
)
from helpers import zero_module

SMALL = dict(dim=8, heads=2, feature_channels=8, templates=2, order=2, filter_size=3)


def small_model(cell="horst", modality="rgb", **kw):
    return AnticipationModel(ModelConfig(cell=cell, modality=modality, **{**SMALL, **kw}))


def clip_for(modality, rng, n=OBSERVED_FRAMES, batch=None):
    shapes = {"rgb": (3, 16, 16), "flow": (2, 16, 16), "flow_snippets": (10, 16, 16), "obj": (OBJ_DIM,)}
    lead = (n,) if batch is None else (batch, n)
    if modality == "obj":
        return rng.dirichlet(np.ones(OBJ_DIM), size=lead).astype(np.float32)
    return rng.uniform(-1, 1, size=lead + shapes[modality]).astype(np.float32)


class TestConstruction:
    def test_unknown_cell(self):
        with pytest.raises(ConfigError):
            ModelConfig(cell="lstm").validate()

    def test_unknown_modality(self):
        with pytest.raises(ConfigError):
            AnticipationModel(ModelConfig(modality="audio"))

    def test_same_seed_same_weights(self):
        a, b = small_model(seed=3), small_model(seed=3)
        for (n1, p1), (n2, p2) in zip(a.named_parameters(), b.named_parameters()):
            assert n1 == n2
            np.testing.assert_array_equal(p1.data, p2.data)

    def test_frame_shape_checked(self, rng):
        m = small_model()
        with pytest.raises(ConfigError):
            m.encode_frame(np.zeros((2, 16, 16), np.float32))


class TestEncoder:
    def test_output_extent(self, rng):
        m = small_model()
        assert m.encode_frame(clip_for("rgb", rng)[0]).shape == (8, 4, 4)

    def test_deterministic(self, rng):
        m = small_model()
        f = clip_for("rgb", rng)[0]
        np.testing.assert_array_equal(m.encode_frame(f).data, m.encode_frame(f).data)

    def test_frozen_encoder_gets_no_gradient(self, rng):
        m = small_model()
        m.freeze_encoder()
        out = m.rollout(clip_for("rgb", rng))
        out.final["action"].sum().backward()
        assert all(p.grad is None for p in m.encoder_parameters())
        assert any(p.grad is not None for p in m.cell.parameters())

    def test_zero_encoder_gives_zero_features(self, rng):
        m = small_model()
        zero_module(m.encoder)
        assert np.all(m.encode_frame(clip_for("rgb", rng)[0]).data == 0)

    def test_object_stream_passes_through(self, rng):
        m = small_model(modality="obj")
        v = clip_for("obj", rng)[0]
        np.testing.assert_array_equal(m.encode_frame(v).data, v)
        assert m.encoder_parameters() == []


@pytest.mark.parametrize("cell", CELL_KINDS)
class TestRollout:
    def test_one_prediction_per_observed_frame(self, rng, cell):
        m = small_model(cell)
        out = m.rollout(clip_for("rgb", rng))
        assert len(out) == OBSERVED_FRAMES
        assert out.final["verb"].shape == (6,)
        assert out.final["noun"].shape == (8,)
        assert out.final["action"].shape == (12,)

    def test_batched_matches_single(self, rng, cell):
        m = small_model(cell).astype(np.float64)
        clips = clip_for("rgb", rng, batch=2).astype(np.float64)
        batched = m.predict(clips)
        single = m.predict(clips[1])
        for task in ("verb", "noun", "action"):
            np.testing.assert_allclose(batched[task][1], single[task], atol=1e-10)

    def test_order_matters(self, rng, cell):
        m = small_model(cell)
        c = clip_for("rgb", rng)
        a = m.rollout(c).final["action"].data
        b = m.rollout(c[::-1].copy()).final["action"].data
        assert not np.allclose(a, b)

    def test_scores_are_distributions(self, rng, cell):
        scores = predict(clip_for("rgb", rng), small_model(cell))
        for s in scores.values():
            assert np.all(s >= 0)
            assert abs(s.sum() - 1) < 1e-5

    def test_withheld_frames_refused(self, rng, cell):
        m = small_model(cell)
        with pytest.raises(ContractError):
            m.rollout(clip_for("rgb", rng, n=TOTAL_FRAMES))
        assert len(m.rollout(clip_for("rgb", rng, n=TOTAL_FRAMES), allow_withheld=True)) == TOTAL_FRAMES


@pytest.mark.parametrize("modality", ["flow", "flow_snippets", "obj"])
@pytest.mark.parametrize("cell", ["horst", "mpnnel_ctp"])
def test_other_modalities(rng, modality, cell):
    m = small_model(cell, modality)
    scores = m.predict(clip_for(modality, rng, batch=2))
    assert scores["action"].shape == (2, 12)


def test_zero_heads_give_uniform_scores(rng):
    m = small_model("mpnnel_tb")
    zero_module(m.heads)
    scores = m.predict(clip_for("rgb", rng))
    np.testing.assert_allclose(scores["verb"], np.full(6, 1 / 6), rtol=1e-6)
    np.testing.assert_allclose(scores["action"], np.full(12, 1 / 12), rtol=1e-6)


def test_prefix_predictions_match_shorter_clip(rng):
    m = small_model("horst").astype(np.float64)
    c = clip_for("rgb", rng).astype(np.float64)
    full = m.rollout(c)
    part = m.rollout(c[:5])
    np.testing.assert_allclose(full.steps[4]["noun"].data, part.final["noun"].data, atol=1e-12)


def test_empty_clip_rejected():
    m = small_model()
    with pytest.raises(ContractError):
        m.rollout([])


@pytest.mark.parametrize("cell", CELL_KINDS)
def test_checkpoint_round_trip(tmp_path, rng, cell):
    m = small_model(cell, seed=5)
    m.freeze_encoder()
    save_checkpoint(m, tmp_path / "ck", {"phase": "ordinary"})
    loaded, manifest = load_checkpoint(tmp_path / "ck")
    assert manifest["phase"] == "ordinary"
    assert loaded.encoder_frozen
    c = clip_for("rgb", rng)
    for task, s in m.predict(c).items():
        np.testing.assert_array_equal(loaded.predict(c)[task], s)


def test_no_grad_prediction_builds_no_graph(rng):
    m = small_model()
    with T.no_grad():
        out = m.rollout(clip_for("rgb", rng))
    assert not out.final["verb"].requires_grad
