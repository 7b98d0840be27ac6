import numpy as np
import pytest

from linfuse import conv_ops
from linfuse.attention import model_to_bytes
from linfuse.conv_ops import build_channel_set
from linfuse.errors import ChannelMismatch, EmptySplit, InvalidSpec, TooFewLabels
from linfuse.graph_store import make_dataset
from linfuse.trainer import (
    TrainConfig,
    channel_mask,
    evaluate,
    inductive_infer,
    mean_agg,
    predict_channels,
    sample_ref_target,
    split_accuracies,
    train,
    train_coordinates,
)
from synth import csbm


@pytest.fixture(scope="module")
def graph():
    return csbm(n=400, c=3, d=12, train_per_class=40, seed=1)


@pytest.fixture(scope="module")
def trained(graph):
    cfg = TrainConfig(n_batches=60, batch_size=32, hidden=(8,), lr=1e-2, seed=3)
    return train(graph, cfg)


class TestSampling:
    def test_half_split_when_few_labels(self, rng):
        labeled = np.arange(120)
        ref, target = sample_ref_target(labeled, 128, rng)
        assert len(ref) == len(target) == 60
        assert not np.intersect1d(ref, target).size
        np.testing.assert_array_equal(np.sort(np.concatenate([ref, target])), labeled)

    def test_full_batch(self, rng):
        ref, target = sample_ref_target(np.arange(1000), 128, rng)
        assert len(target) == 128
        assert len(ref) == 4 * 128
        assert not np.intersect1d(ref, target).size

    def test_ref_cap(self, rng):
        ref, _ = sample_ref_target(np.arange(1000), 128, rng, ref_cap=100)
        assert len(ref) == 872

    def test_too_few(self, rng):
        with pytest.raises(TooFewLabels):
            sample_ref_target(np.array([3]), 128, rng)

    def test_two_labels(self, rng):
        ref, target = sample_ref_target(np.array([4, 9]), 128, rng)
        assert len(ref) == len(target) == 1


class TestConfig:
    @pytest.mark.parametrize("kw", [dict(n_batches=0), dict(batch_size=1), dict(lr=0.0), dict(channels="sgc0")])
    def test_rejected(self, kw):
        with pytest.raises(InvalidSpec):
            TrainConfig(**kw)

    def test_presets(self):
        cora = TrainConfig.preset("cora")
        assert (cora.n_batches, cora.hidden, cora.entropy) == (500, (), 2.0)
        wis = TrainConfig.preset("Wisconsin", seed=4)
        assert (wis.n_batches, wis.hidden, wis.entropy, wis.seed) == (1000, (32,), 1.0, 4)

    def test_mask(self):
        np.testing.assert_array_equal(channel_mask(conv_ops.DEFAULT_CHANNELS, True), [1, 1, 1, 0, 0])
        assert channel_mask(conv_ops.DEFAULT_CHANNELS, False).all()


class TestCoordinates:
    def test_same_predictions_as_full_features(self, graph, rng):
        from linfuse.solver import solve_all

        caches = build_channel_set(conv_ops.DEFAULT_CHANNELS, graph)
        labeled = graph.split("train")
        coords = train_coordinates(caches, labeled)
        assert all(z.features.shape[1] <= min(len(labeled), graph.features.shape[1]) for z in coords)
        slot = {u: i for i, u in enumerate(labeled)}
        for _ in range(10):
            ref, target = sample_ref_target(labeled, 32, rng)
            y = graph.one_hot(ref)
            full = solve_all(caches, ref, y, rows=target)
            fast = solve_all(coords, [slot[u] for u in ref], y, rows=[slot[u] for u in target])
            for a, b in zip(full, fast):
                np.testing.assert_allclose(b.probs, a.probs, atol=1e-10)

    def test_rank_deficient(self):
        g = csbm(n=60, c=3, d=40, train_per_class=15, seed=4)
        x = g.features.copy()
        x[:, 20:] = x[:, :20] @ np.random.default_rng(0).normal(size=(20, 20))
        g2 = make_dataset(g.adjacency, x, g.labels, g.splits, num_classes=3, directed=False)
        caches = build_channel_set(["linear"], g2)
        coords = train_coordinates(caches, g2.split("train"))
        assert coords[0].features.shape[1] == 20


class TestTrain:
    def test_seed_determinism(self, graph, trained):
        cfg = TrainConfig(n_batches=60, batch_size=32, hidden=(8,), lr=1e-2, seed=3)
        model, metrics = train(graph, cfg)
        assert model_to_bytes(model) == model_to_bytes(trained[0])
        assert metrics.loss_trace == trained[1].loss_trace

    def test_different_seed_differs(self, graph, trained):
        cfg = TrainConfig(n_batches=60, batch_size=32, hidden=(8,), lr=1e-2, seed=4)
        assert model_to_bytes(train(graph, cfg)[0]) != model_to_bytes(trained[0])

    def test_no_propagation_in_loop(self, trained):
        assert trained[1].extra["propagations_in_loop"] == 0

    def test_ref_sizes(self, graph, trained):
        # 120 labels, batch 32: target 32, ref = remaining 88 (< cap 128)
        assert set(trained[1].extra["ref_sizes"]) == {88}

    def test_masked_channels_stay_dark(self, graph, trained):
        model = trained[0]
        _, m = inductive_infer(model, graph)
        assert m.mean_attention["hgc1"] == 0.0 and m.mean_attention["hgc2"] == 0.0

    def test_loss_decreases(self):
        g = csbm(n=600, c=4, d=16, homophily=0.9, signal=0.6, train_per_class=60, seed=5)
        _, m = train(g, TrainConfig(n_batches=300, batch_size=64, hidden=(16,), lr=5e-3, seed=0))
        trace = np.array(m.loss_trace)
        assert np.all(np.isfinite(trace))
        assert trace[-100:].mean() < trace[:20].mean()

    def test_channel_mismatch(self, graph):
        caches = build_channel_set(["linear", "sgc1"], graph)
        with pytest.raises(ChannelMismatch):
            train(graph, TrainConfig(n_batches=1), caches=caches)

    def test_too_few_train_labels(self, graph):
        g = make_dataset(
            graph.adjacency, graph.features, graph.labels, {"train": [0], "test": [1, 2]}, num_classes=3
        )
        with pytest.raises(TooFewLabels):
            train(g, TrainConfig(n_batches=1))


class TestInference:
    def test_model_untouched(self, graph, trained):
        model = trained[0]
        before = model_to_bytes(model)
        ybar, m = inductive_infer(model, graph)
        assert model_to_bytes(model) == before
        assert m.extra["param_digest"] == model.params.digest()
        np.testing.assert_allclose(ybar.sum(1), 1.0, atol=1e-12)

    def test_transfer_other_shapes(self, trained):
        other = csbm(n=150, c=6, d=40, train_per_class=5, seed=9)
        ybar, m = inductive_infer(trained[0], other)
        assert ybar.shape == (150, 6)
        assert set(m.accuracy) == {"train", "val", "test"}

    def test_matches_manual_pipeline(self, graph, trained):
        from linfuse.attention import attention_forward, fuse
        from linfuse.features import assemble_features

        model = trained[0]
        caches = build_channel_set(model.channels, graph)
        preds = predict_channels(caches, graph)
        alpha = attention_forward(model, assemble_features(preds, model.entropy).values)
        ybar, _ = inductive_infer(model, graph, caches=caches)
        np.testing.assert_array_equal(ybar, fuse(alpha, preds))

    def test_channel_mismatch(self, graph, trained):
        caches = build_channel_set(["linear", "sgc1", "sgc2", "hgc1"], graph)
        with pytest.raises(ChannelMismatch):
            inductive_infer(trained[0], graph, caches=caches)

    def test_fused_accuracy_reasonable(self, graph, trained):
        ybar, m = inductive_infer(trained[0], graph)
        lin = predict_channels(build_channel_set(["linear"], graph), graph)[:, 0]
        assert m.accuracy["test"] >= evaluate(lin, graph, "test") - 0.05


class TestEvaluate:
    def test_perfect_and_half(self, edge2):
        np.testing.assert_equal(evaluate(np.eye(2), edge2, [0, 1]), 1.0)
        np.testing.assert_equal(evaluate(np.array([[1.0, 0], [1.0, 0]]), edge2, [0, 1]), 0.5)

    def test_tie_goes_to_lowest(self, edge2):
        assert evaluate(np.full((2, 2), 0.5), edge2, [0, 1]) == 0.5

    def test_empty(self, edge2):
        with pytest.raises(EmptySplit):
            evaluate(np.eye(2), edge2, "val")
        assert split_accuracies(np.eye(2), edge2)["val"] is None

    def test_mean_agg_is_average(self, graph):
        caches = build_channel_set(conv_ops.DEFAULT_CHANNELS, graph)
        preds = predict_channels(caches, graph)
        np.testing.assert_allclose(mean_agg(graph, caches=caches), preds.mean(1), atol=1e-15)
        np.testing.assert_allclose(mean_agg(graph, caches=caches).sum(1), 1.0, atol=1e-12)
