import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gcnfuse import gcn
from gcnfuse.graph import InstanceGraph
from gcnfuse.numeric import ShapeError
from oracles import (
    dense_forward_logits,
    naive_aggregate,
    naive_layer,
    random_graph,
    softmax_ce,
)


def two_cluster_graph(rng, per=20, d=10):
    """Two cliques with class-shifted features and a few bridges."""
    n = 2 * per
    labels = np.repeat([0, 1], per)
    edges = [(i, j) for i in range(n) for j in range(i + 1, n) if labels[i] == labels[j] and rng.random() < 0.4]
    edges += [(int(rng.integers(per)), int(per + rng.integers(per))) for _ in range(4)]
    x = rng.uniform(0, 1, (n, d)) * 0.6 + 0.4 * labels[:, None]
    return InstanceGraph(n, edges, x, labels, train_mask=np.ones(n, bool))


def test_aggregate_small_examples():
    g = InstanceGraph(3, [(0, 1), (0, 2)])
    h = np.array([[0.0], [2.0], [4.0]])
    assert gcn.aggregate(h, g, "mean")[0, 0] == 3.0
    assert gcn.aggregate(h, g, "sum")[0, 0] == 6.0
    assert gcn.aggregate(h, g, "max")[0, 0] == 4.0


def test_aggregate_path_graph():
    g = InstanceGraph(3, [(0, 1), (1, 2)])
    h = np.array([[1.0], [2.0], [3.0]])
    assert gcn.aggregate(h, g, "mean").ravel().tolist() == [2.0, 2.0, 2.0]


def test_isolated_node_aggregates_to_zero():
    g = InstanceGraph(3, [(0, 1)])
    h = np.array([[-1.0, 2.0], [-3.0, 5.0], [7.0, 7.0]])
    for kind in gcn.AGGREGATIONS:
        assert not gcn.aggregate(h, g, kind)[2].any()
    assert gcn.aggregate(h, g, "max")[0].tolist() == [-3.0, 5.0]


def test_aggregate_rejects_unknown_kind():
    with pytest.raises(ValueError, match="median"):
        gcn.aggregate(np.ones((2, 1)), InstanceGraph(2, [(0, 1)]), "median")


@pytest.mark.parametrize("kind", gcn.AGGREGATIONS)
def test_aggregate_and_layer_match_node_oracle(kind):
    rng = np.random.default_rng(5)
    for _ in range(5):
        g = random_graph(rng, int(rng.integers(2, 21)), p=0.35, d=int(rng.integers(1, 5)))
        r = gcn.aggregate(g.features, g, kind)
        assert np.array_equal(r, naive_aggregate(g.features, g, kind))
        for act in gcn.ACTIVATIONS:
            layer = gcn.GcnLayer(rng.normal(size=(2 * g.features.shape[1], 3)), act)
            out = gcn.layer_forward(layer, g.features, r)
            assert np.array_equal(out, naive_layer(layer.weight, g.features, r, act))


def test_layer_forward_constructions(rng):
    h = rng.normal(size=(4, 3))
    r = rng.normal(size=(4, 3))
    assert not gcn.layer_forward(gcn.GcnLayer(np.zeros((6, 2))), h, r).any()
    self_only = np.vstack([np.zeros((3, 3)), np.eye(3)])
    assert np.array_equal(gcn.layer_forward(gcn.GcnLayer(self_only), h, r), np.maximum(h, 0))
    with pytest.raises(ShapeError):
        gcn.layer_forward(gcn.GcnLayer(np.zeros((4, 2))), h, r)


def test_model_construction():
    m = gcn.GcnModel.create([10, 50, 20, 3], seed=1)
    assert m.depth == 3 and m.widths == [10, 50, 20, 3] and m.n_classes == 3
    assert [l.weight.shape for l in m.layers] == [(20, 50), (100, 20), (40, 3)]
    assert [l.activation for l in m.layers] == ["relu", "relu", "identity"]
    for l in m.layers:
        r = np.sqrt(6 / sum(l.weight.shape))
        assert np.abs(l.weight).max() <= r
    with pytest.raises(ShapeError):
        gcn.GcnModel([gcn.GcnLayer(np.zeros((20, 5))), gcn.GcnLayer(np.zeros((8, 2)))])


def test_init_embeddings_copies(rng):
    g = random_graph(rng, 5)
    h = gcn.init_embeddings(g)
    assert np.array_equal(h, g.features) and h.shape == g.features.shape
    h[0, 0] += 1
    assert h[0, 0] != g.features[0, 0]


def test_forward_rows_sum_to_one_and_edgeless_is_local(rng):
    g = random_graph(rng, 8, d=4)
    m = gcn.GcnModel.create([4, 6, 3], seed=2)
    p = gcn.forward(m, g)
    assert np.all(np.abs(p.sum(axis=1) - 1) <= 1e-9)
    bare = InstanceGraph(8, [], g.features)
    solo = np.vstack([gcn.forward(m, InstanceGraph(1, [], g.features[v:v + 1])) for v in range(8)])
    assert np.array_equal(gcn.forward(m, bare), solo)


@pytest.mark.parametrize("kind", gcn.AGGREGATIONS)
def test_forward_agrees_with_dense_reference(kind, rng):
    g = random_graph(rng, 12, d=4)
    m = gcn.GcnModel.create([4, 7, 5, 3], kind, seed=3)
    ref = dense_forward_logits([l.weight for l in m.layers], [l.activation for l in m.layers],
                               g.features, g.adjacency(), kind)
    np.testing.assert_allclose(gcn.embeddings(m, g)[-1], ref, rtol=1e-12, atol=1e-13)


def _relabel(g, perm):
    """Graph whose node ``k`` is node ``perm[k]`` of ``g``."""
    inv = np.argsort(perm)
    edges = [(inv[i], inv[j]) for i, j in g.edges.tolist()]
    return InstanceGraph(g.n, edges, g.features[perm])


@given(st.integers(2, 14), st.integers(0, 2**32 - 1), st.sampled_from(gcn.AGGREGATIONS))
def test_permutation_equivariance_is_exact(n, seed, kind):
    rng = np.random.default_rng(seed)
    g = random_graph(rng, n, p=0.5, d=3)
    perm = rng.permutation(n)
    m = gcn.GcnModel.create([3, 5, 4, 2], kind, seed=seed % 1000)
    assert np.array_equal(gcn.forward(m, _relabel(g, perm)), gcn.forward(m, g)[perm])
    pred, _ = gcn.predict(m, g)
    assert np.array_equal(gcn.predict(m, _relabel(g, perm))[0], pred[perm])


def test_equivariance_with_symmetric_features():
    # Twin nodes with equal features exercise the tie handling of the value-sorted order.
    rng = np.random.default_rng(0)
    base = rng.normal(size=(4, 3))
    x = base[[0, 1, 1, 2, 2, 2, 3, 0]]
    g = InstanceGraph(8, [(0, 1), (0, 2), (1, 3), (2, 4), (3, 5), (4, 5), (5, 6), (6, 7), (1, 7), (2, 6)], x)
    m = gcn.GcnModel.create([3, 4, 4, 2], "sum", seed=9)
    for s in range(20):
        perm = np.random.default_rng(s).permutation(8)
        assert np.array_equal(gcn.forward(m, _relabel(g, perm)), gcn.forward(m, g)[perm])


@pytest.mark.parametrize("kind", gcn.AGGREGATIONS)
def test_neighbor_order_tolerance(kind, rng):
    g = random_graph(rng, 15, p=0.6, d=4)
    h = rng.normal(size=(15, 4)) * 100
    base = gcn.aggregate(h, g, kind)
    index = g.neighbor_index()
    for _ in range(10):
        shuffled = index.copy()
        for v in range(g.n):
            k = len(g.neighbors(v))
            shuffled[v, :k] = rng.permutation(shuffled[v, :k])
        other = gcn.aggregate_by_index(h, shuffled, kind)
        if kind == "max":
            assert np.array_equal(other, base)
        else:
            assert np.all(np.abs(other - base) <= 1e-12 * np.maximum(np.abs(h).max() * 15, 1))


def test_predict_tie_rule_and_argmax():
    m = gcn.GcnModel([gcn.GcnLayer(np.zeros((4, 3)), "identity")])
    g = InstanceGraph(3, [(0, 1)], np.ones((3, 2)))
    pred, probs = gcn.predict(m, g)
    assert pred.tolist() == [0, 0, 0]
    assert np.array_equal(pred, probs.argmax(axis=1))
    with pytest.raises(ShapeError):
        gcn.predict(m, InstanceGraph(3, [], np.ones((3, 5))))


def test_loss_and_grads_match_dense_loss(rng):
    g = random_graph(rng, 10, d=3)
    g = InstanceGraph(g.n, g.edges, g.features, rng.integers(0, 2, 10))
    m = gcn.GcnModel.create([3, 4, 2], "mean", seed=4)
    loss, probs, grads = gcn.loss_and_grads(m, g)
    logits = dense_forward_logits([l.weight for l in m.layers], [l.activation for l in m.layers],
                                  g.features, g.adjacency(), "mean")
    assert loss == pytest.approx(softmax_ce(logits, g.labels), rel=1e-12)
    assert set(grads) == {"W0", "W1"}


def test_zero_learning_rate_keeps_parameters(rng):
    g = two_cluster_graph(rng)
    m = gcn.GcnModel.create([10, 20, 2], seed=0)
    out, state = gcn.train(m, g, gcn.TrainConfig(iterations=5, learning_rate=0.0))
    for a, b in zip(m.layers, out.layers):
        assert np.array_equal(a.weight, b.weight)
    assert len(set(state.loss)) == 1 and len(state.loss) == 5


def test_training_is_deterministic_and_fits_two_clusters(rng):
    g = two_cluster_graph(rng)
    m = gcn.GcnModel.create([10, 50, 20, 2], "mean", seed=0)
    _, a = gcn.train(m, g, gcn.TrainConfig(learning_rate=gcn.STABLE_LEARNING_RATE))
    _, b = gcn.train(m, g, gcn.TrainConfig(learning_rate=gcn.STABLE_LEARNING_RATE))
    assert a.loss == b.loss and len(a.loss) == 150 == a.iteration
    assert max(a.train_accuracy) >= 0.95


def test_loss_non_increasing_at_default_rate():
    rng = np.random.default_rng(3)
    for seed in range(3):
        g = two_cluster_graph(rng)
        _, state = gcn.train(gcn.GcnModel.create([10, 50, 20, 2], seed=seed), g, gcn.TrainConfig(learning_rate=gcn.STABLE_LEARNING_RATE))
        assert all(b <= a + 1e-12 for a, b in zip(state.loss, state.loss[1:]))


def test_train_rejects_unlabelled(rng):
    g = two_cluster_graph(rng)
    g.train_mask = np.zeros(g.n, bool)
    with pytest.raises(ValueError, match="no labeled nodes"):
        gcn.train(gcn.GcnModel.create([10, 2]), g)


def test_model_round_trip(tmp_path):
    m = gcn.GcnModel.create([10, 50, 20, 3], "max", seed=11)
    gcn.save_model(m, tmp_path / "m.txt")
    back = gcn.load_model(tmp_path / "m.txt")
    assert back.aggregation == "max" and back.seed == 11 and back.widths == m.widths
    for a, b in zip(m.layers, back.layers):
        assert np.array_equal(a.weight, b.weight) and a.activation == b.activation
    (tmp_path / "bad.txt").write_text("something else\n")
    with pytest.raises(ValueError):
        gcn.load_model(tmp_path / "bad.txt")
