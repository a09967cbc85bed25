"""Coarse-stage ranker: features, margin loss, preference mining, and the
staged alternating trainer."""

import numpy as np
import pytest

from conftest import EMBED_DIM, PlantedWorld, WorldConfig
from relink.errors import DimensionMismatchError
from relink.explorer import ExplorationContext
from relink.generation import load_templates
from relink.kg import InstantiatedOverlay
from relink.pipeline import make_featurizer
from relink.ranker import (
    FeatureSet,
    RankerModel,
    StagedConfig,
    features,
    mine_preferences,
    rank_accuracy,
    rank_loss,
    rank_loss_batch,
    staged_train,
    train_ranker_epoch,
)
from relink.space import ProjectionAdapter


class TestFeatures:
    def test_layout(self):
        q = np.array([1.0, 2.0])
        e = np.array([3.0, 4.0])
        np.testing.assert_allclose(
            features(q, e, 0.5), [1.0, 2.0, 3.0, 4.0, 3.0, 8.0, 0.5])

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatchError):
            features(np.zeros(2), np.zeros(3), 0.0)


class TestRankerModel:
    def test_create_shapes(self):
        model = RankerModel.create(8, hidden=16, seed=0)
        assert model.w1.shape == (25, 16)
        assert model.feature_dim == 25

    def test_score_batch_matches_scalar_score(self):
        model = RankerModel.create(4, seed=1)
        rng = np.random.default_rng(1)
        q = rng.standard_normal((5, 4))
        e = rng.standard_normal((5, 4))
        prev = rng.random(5)
        batch = model.score_batch(q, e, prev)
        for i in range(5):
            assert batch[i] == pytest.approx(model.score(q[i], e[i], prev[i]))

    def test_feature_dim_checked(self):
        model = RankerModel.create(4, seed=0)
        with pytest.raises(DimensionMismatchError):
            model.score_features(np.zeros(7))

    def test_save_load_round_trip(self, tmp_path):
        model = RankerModel.create(4, hidden=8, seed=3)
        model.save(tmp_path / "r.json", tmp_path / "r.f32")
        loaded = RankerModel.load(tmp_path / "r.json", tmp_path / "r.f32")
        phi = np.random.default_rng(0).standard_normal(13)
        assert loaded.score_features(phi) == \
            pytest.approx(model.score_features(phi), abs=1e-5)

    def test_gradients_match_finite_differences(self):
        model = RankerModel.create(3, hidden=4, seed=5)
        phi = np.random.default_rng(5).standard_normal(10)
        _, grads = model.score_and_grads(phi)
        h = 1e-6
        for name in ("w1", "b1", "w2"):
            arr = getattr(model, name)
            it = np.nditer(arr, flags=["multi_index"])
            for _ in it:
                idx = it.multi_index
                orig = arr[idx]
                arr[idx] = orig + h
                sp = model.score_features(phi)
                arr[idx] = orig - h
                sm = model.score_features(phi)
                arr[idx] = orig
                assert grads[name][idx] == pytest.approx(
                    (sp - sm) / (2 * h), abs=1e-5)


def _feature_set(n=40, d=4, seed=0, separation=1.0):
    """Tuples where the positive edge points along the query direction and
    the negative away from it."""
    rng = np.random.default_rng(seed)
    q = rng.standard_normal((n, d))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    noise = 0.1 * rng.standard_normal((n, d))
    pos = q * separation + noise
    neg = -q * separation + noise
    prev = rng.random(n)
    return FeatureSet(q, pos, prev, neg, prev.copy())


class TestRankLoss:
    def test_hinge_clamps_at_zero(self):
        model = RankerModel.create(2, seed=0)
        q, e = np.ones(2), np.ones(2)
        loss = rank_loss(model, q, e, 0.0, e, 0.0, margin=0.2)
        assert loss == pytest.approx(0.2)  # identical edges: s_pos == s_neg
        big = rank_loss(model, q, e, 0.0, e, 0.0, margin=5.0)
        assert big == pytest.approx(5.0)

    def test_margin_must_be_positive(self):
        model = RankerModel.create(2, seed=0)
        with pytest.raises(ValueError):
            rank_loss(model, np.ones(2), np.ones(2), 0.0, np.ones(2), 0.0, 0.0)

    def test_batch_loss_is_mean_of_scalars(self):
        model = RankerModel.create(3, seed=2)
        feats = _feature_set(n=10, d=3, seed=2)
        per = [
            rank_loss(model, feats.q[i], feats.pos_edge[i], feats.pos_prev[i],
                      feats.neg_edge[i], feats.neg_prev[i], 0.2)
            for i in range(10)
        ]
        assert rank_loss_batch(model, feats, 0.2) == pytest.approx(np.mean(per))


class TestTrainRankerEpoch:
    def test_accuracy_improves_on_separable_set(self):
        feats = _feature_set(n=100, d=4, seed=3)
        model = RankerModel.create(4, seed=3)
        rng = np.random.default_rng(3)
        before = rank_accuracy(model, feats)
        for _ in range(10):
            train_ranker_epoch(model, feats, 0.2, 0.05, rng)
        after = rank_accuracy(model, feats)
        assert after > before
        assert after == 1.0

    def test_satisfied_margins_leave_model_unchanged(self):
        feats = _feature_set(n=20, d=4, seed=4)
        model = RankerModel.create(4, seed=4)
        rng = np.random.default_rng(4)
        for _ in range(30):
            train_ranker_epoch(model, feats, 0.2, 0.05, rng)
        assert rank_loss_batch(model, feats, 0.2) == 0.0
        h = model.params_hash()
        train_ranker_epoch(model, feats, 0.2, 0.05, rng)
        assert model.params_hash() == h


@pytest.fixture
def mining_world(tmp_path):
    world = PlantedWorld(WorldConfig(n_questions=4), tmp_path)
    gateway = world.gateway()
    store, backbone, pool = world.build_stores(gateway)
    ctx = ExplorationContext(
        store, backbone, pool, InstantiatedOverlay(),
        ProjectionAdapter.identity(EMBED_DIM),
        RankerModel.create(EMBED_DIM, seed=0), gateway, load_templates(),
        world.explore_config(),
    )
    return world, ctx


class TestMinePreferences:
    def test_positives_follow_gold_chains(self, mining_world):
        world, ctx = mining_world
        tuples = mine_preferences(world.qa_records(), ctx, 2, seed=0)
        assert tuples
        for t in tuples:
            qi = int(t.query.query_id[1:])
            pair = {t.pos_edge.from_entity, t.pos_edge.to_entity}
            assert any({a, b} == pair for a, b in world.gold_pairs[qi])
            neg_pair = {t.neg_edge.from_entity, t.neg_edge.to_entity}
            assert not any({a, b} == neg_pair for a, b in world.gold_pairs[qi])

    def test_negatives_capped_and_seeded(self, mining_world):
        world, ctx = mining_world
        t1 = mine_preferences(world.qa_records(), ctx, 2, seed=0)
        t2 = mine_preferences(world.qa_records(), ctx, 2, seed=0)
        t3 = mine_preferences(world.qa_records(), ctx, 3, seed=0)
        assert [(a.pos_edge, a.neg_edge) for a in t1] == \
            [(a.pos_edge, a.neg_edge) for a in t2]
        assert len(t3) > len(t1)
        # one positive contributes at most negatives_per_positive tuples
        n_steps = sum(len(world.gold_pairs[i]) for i in range(4))
        assert len(t1) <= 2 * n_steps


class TestStagedTrain:
    def test_reaches_perfect_validation_accuracy(self):
        feats = _feature_set(n=200, d=6, seed=6)
        ranker = RankerModel.create(6, seed=6)
        adapter = ProjectionAdapter.identity(6)
        rng = np.random.default_rng(6)
        x = rng.standard_normal((32, 6))
        best_ranker, best_adapter = staged_train(
            ranker, adapter, lambda a: feats, x, x.copy(),
            StagedConfig(lr_ranker=0.05, max_cycles=20, seed=6),
        )
        assert rank_accuracy(best_ranker, feats) == 1.0
        # inputs untouched
        assert ranker.params_hash() == RankerModel.create(6, seed=6).params_hash()
        assert adapter.params_hash() == ProjectionAdapter.identity(6).params_hash()
        # the adapter stage did run
        assert best_adapter.params_hash() != adapter.params_hash()

    def test_adapter_stage_skipped_without_pairs(self):
        feats = _feature_set(n=50, d=4, seed=7)
        ranker = RankerModel.create(4, seed=7)
        adapter = ProjectionAdapter.identity(4)
        _, best_adapter = staged_train(
            ranker, adapter, lambda a: feats, np.zeros((0, 4)), np.zeros((0, 4)),
            StagedConfig(lr_ranker=0.05, max_cycles=5, seed=7),
        )
        assert best_adapter.params_hash() == adapter.params_hash()


class TestMakeFeaturizer:
    def test_features_respond_to_adapter(self, mining_world):
        world, ctx = mining_world
        prefs = mine_preferences(world.qa_records(), ctx, 2, seed=0)
        featurize = make_featurizer(prefs, ctx)
        f_id = featurize(ProjectionAdapter.identity(EMBED_DIM))
        f_rand = featurize(ProjectionAdapter.random(EMBED_DIM, EMBED_DIM, seed=1))
        assert len(f_id) == len(prefs)
        assert not np.allclose(f_id.pos_edge, f_rand.pos_edge)
        # all projected rows are unit-norm
        np.testing.assert_allclose(
            np.linalg.norm(f_id.q, axis=1), 1.0, atol=1e-9)
