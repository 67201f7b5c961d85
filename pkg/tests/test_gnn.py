from __future__ import annotations

import numpy as np
import pytest
import torch

from gnnsteal.errors import ShapeError, ValidationError
from gnnsteal.gnn import (
    GATLayer,
    GINLayer,
    ModelConfig,
    ModelHandle,
    SAGELayer,
    Structure,
    surrogate_config,
    target_config,
)
from gnnsteal.graph import Graph, canonical_edges, generate_sbm, split_nodes
from gnnsteal.training import (
    ClassifierHead,
    TrainConfig,
    argmax_lowest,
    predict,
    train_classifier_head,
    train_target,
)

from .conftest import erdos_renyi
from .gradcheck import check_module, random_messages


def make_layer(kind: str, din: int, dout: int, seed: int):
    gen = torch.Generator().manual_seed(seed)
    if kind == "GIN":
        return GINLayer(din, dout, gen)
    if kind == "SAGE":
        return SAGELayer(din, dout, gen)
    if kind == "GAT-concat":
        return GATLayer(din, 2, 3, concat=True, gen=gen)
    return GATLayer(din, dout, 3, concat=False, gen=gen)


@pytest.mark.parametrize("kind", ["GIN", "SAGE", "GAT-concat", "GAT-mean"])
def test_layer_gradients_match_finite_differences(kind):
    rng = np.random.default_rng(0)
    for trial in range(20):
        n, din, dout = int(rng.integers(2, 11)), int(rng.integers(1, 9)), int(rng.integers(1, 9))
        layer = make_layer(kind, din, dout, trial).double()
        dst, src, w = random_messages(n, 0.4, rng, weighted=trial % 2 == 1)
        h = torch.tensor(rng.normal(size=(n, din)), requires_grad=True)
        target = torch.tensor(rng.normal(size=(n, layer(h, dst, src, w).shape[1])))

        def loss():
            return ((layer(h, dst, src, w) - target) ** 2).sum()

        assert check_module(loss, [h, *layer.parameters()]) < 1e-4


def test_classifier_head_gradients():
    rng = np.random.default_rng(1)
    for trial in range(20):
        head = ClassifierHead(int(rng.integers(1, 9)), 3, hidden=5, seed=trial).double()
        z = torch.tensor(rng.normal(size=(6, head.in_dim)), requires_grad=True)
        y = torch.tensor(rng.integers(0, 3, size=6))
        loss = lambda: torch.nn.functional.cross_entropy(head(z), y)
        assert check_module(loss, [z, *head.parameters()]) < 1e-4


class TestConfigs:
    def test_target_configs(self):
        gin, gat, sage = (target_config(a, 10, 4) for a in ("GIN", "GAT", "SAGE"))
        assert (gin.num_layers, gat.num_layers, sage.num_layers) == (3, 3, 2)
        assert gin.fanouts == (10, 10, 10) and sage.fanouts == (25, 10)
        assert gat.heads == 4 and {c.hidden_dim for c in (gin, gat, sage)} == {128}
        assert {c.dropout for c in (gin, gat, sage)} == {0.5}

    def test_surrogate_configs(self):
        for arch in ("GIN", "GAT", "SAGE"):
            c = surrogate_config(arch, 10, 7)
            assert (c.num_layers, c.fanouts, c.hidden_dim, c.output_dim) == (2, (10, 50), 128, 7)

    def test_fanout_mismatch(self):
        with pytest.raises(ValidationError):
            ModelConfig("GIN", "target", 3, 3, 8, 2, (10, 10))

    @pytest.mark.parametrize("arch", ["GIN", "GAT", "SAGE"])
    def test_output_shapes(self, arch):
        g = erdos_renyi(12, 0.3, seed=0, d=5)
        h = ModelHandle.create(target_config(arch, 5, 3), seed=1)
        emb, out = h.run(g)
        assert out.shape == (12, 3) and emb.shape == (12, 128)
        s = ModelHandle.create(surrogate_config(arch, 5, 6), seed=1)
        assert s.forward(g).shape == (12, 6)


class TestForward:
    def test_isolated_node_depends_only_on_own_features(self):
        cfg = ModelConfig("GIN", "surrogate", 2, 2, 4, 3, (10, 10))
        h = ModelHandle.create(cfg, seed=0)
        X = np.array([[1.0, 2.0], [3.0, -1.0], [0.5, 0.5]])
        g = Graph(n=3, edges=[(1, 2)], X=X, C=[0, 0, 0])
        g2 = Graph(n=3, edges=[(1, 2)], X=np.vstack([X[0], [9.0, 9.0], [-4.0, 2.0]]), C=[0, 0, 0])
        single = Graph(n=1, edges=np.zeros((0, 2)), X=X[:1], C=[0])
        assert np.allclose(h.forward(g, [0]), h.forward(g2, [0]))
        assert np.allclose(h.forward(g, [0]), h.forward(single))

    def test_seed_irrelevant_when_fanout_covers_degree(self):
        g = erdos_renyi(20, 0.2, seed=3, d=4)
        h = ModelHandle.create(ModelConfig("SAGE", "surrogate", 4, 2, 8, 3, (50, 50)), seed=0)
        assert np.array_equal(h.forward(g, seed=1), h.forward(g, seed=2))

    def test_sampling_changes_output_when_fanout_small(self):
        g = erdos_renyi(30, 0.5, seed=3, d=4)
        h = ModelHandle.create(ModelConfig("GIN", "surrogate", 4, 2, 8, 3, (2, 2)), seed=0)
        assert np.array_equal(h.forward(g, seed=5), h.forward(g, seed=5))
        assert not np.allclose(h.forward(g, seed=1), h.forward(g, seed=2))

    def test_sampling_respects_fanout(self):
        g = erdos_renyi(40, 0.5, seed=4)
        s = Structure.from_graph(g)
        dst, src, _ = s.sample(3, np.random.default_rng(0))
        counts = np.bincount(dst, minlength=g.n)
        assert np.array_equal(counts, np.minimum(s.degrees, 3))
        A = g.dense_adjacency()
        assert np.all(A[dst, src] == 1)
        for v in range(g.n):
            assert len(set(src[dst == v].tolist())) == counts[v]

    def test_sage_hand_computation(self):
        cfg = ModelConfig("SAGE", "surrogate", 2, 2, 2, 2, (10, 10))
        h = ModelHandle.create(cfg)
        with torch.no_grad():
            for layer in h.module.layers:
                layer.lin.weight.copy_(torch.eye(2))
                layer.lin.bias.zero_()
        X = np.array([[3.0, 0.0], [0.0, 6.0], [9.0, -3.0]])
        g = Graph(n=3, edges=[(0, 1), (1, 2)], X=X, C=[0, 0, 0])
        # layer 1: mean over self + neighbors, then ReLU
        h1 = np.array([
            [(3 + 0) / 2, (0 + 6) / 2],
            [(0 + 3 + 9) / 3, (6 + 0 - 3) / 3],
            [(9 + 0) / 2, max((-3 + 6) / 2, 0)],
        ])
        h2 = np.array([
            (h1[0] + h1[1]) / 2,
            (h1[0] + h1[1] + h1[2]) / 3,
            (h1[1] + h1[2]) / 2,
        ])
        assert np.allclose(h.forward(g), h2)

    @pytest.mark.parametrize("arch", ["GIN", "GAT", "SAGE"])
    def test_permutation_equivariance(self, arch):
        g = erdos_renyi(15, 0.3, seed=8, d=4)
        h = ModelHandle.create(target_config(arch, 4, 3), seed=2)
        perm = np.random.default_rng(0).permutation(15)
        inv = np.argsort(perm)
        gp = Graph(n=15, edges=canonical_edges(inv[g.edges])[0], X=g.X[perm], C=g.C[perm], num_classes=g.num_classes)
        assert np.allclose(h.forward(g)[perm], h.forward(gp), atol=1e-5)

    def test_feature_dim_mismatch(self):
        h = ModelHandle.create(target_config("GIN", 7, 2))
        with pytest.raises(ShapeError):
            h.forward(erdos_renyi(5, 0.5, seed=0, d=3))

    def test_weighted_messages_scale_contributions(self):
        cfg = ModelConfig("GIN", "surrogate", 1, 1, 1, 1, (10,))
        h = ModelHandle.create(cfg)
        with torch.no_grad():
            h.module.layers[0].lin.weight.fill_(1.0)
            h.module.layers[0].lin.bias.zero_()
        g = Graph(n=2, edges=[(0, 1)], X=[[1.0], [10.0]], C=[0, 0], weights=[-0.5])
        assert np.allclose(h.forward(g).ravel(), [1 - 5.0, 10 - 0.5])


class TestSerialization:
    @pytest.mark.parametrize("arch", ["GIN", "GAT", "SAGE"])
    def test_bit_exact_round_trip(self, tmp_path, arch):
        h = ModelHandle.create(target_config(arch, 6, 3), seed=4)
        h2 = ModelHandle.load(h.save(tmp_path / arch))
        assert h2.config == h.config
        for (k1, v1), (k2, v2) in zip(h.module.state_dict().items(), h2.module.state_dict().items()):
            assert k1 == k2 and torch.equal(v1, v2)
        assert (tmp_path / arch / "weights.bin").read_bytes() == h2.save(tmp_path / "again").joinpath("weights.bin").read_bytes()


class TestTraining:
    def test_separable_two_cliques(self):
        g = generate_sbm((20, 20), 1.0, 0.0, d=4, seed=0, feature_sep=4.0, feature_noise=0.3)
        split = split_nodes(g)
        train_g = g.induced(np.concatenate([split.target_train, split.query]))
        test_g = g.induced(split.test)
        h = train_target(train_g, np.arange(train_g.n), target_config("GIN", 4, 2), TrainConfig(epochs=200))
        assert (predict(h, None, test_g) == test_g.C).mean() == 1.0

    def test_deterministic_log(self):
        g = generate_sbm((15, 15), 0.3, 0.05, d=4, seed=1)
        cfg, t = target_config("GAT", 4, 2), TrainConfig(epochs=8, seed=3)
        a = train_target(g, np.arange(g.n), cfg, t)
        b = train_target(g, np.arange(g.n), cfg, t)
        assert a.training_log == b.training_log
        for v1, v2 in zip(a.module.state_dict().values(), b.module.state_dict().values()):
            assert torch.equal(v1, v2)

    def test_best_validation_selected(self):
        g = generate_sbm((20, 20, 20), 0.2, 0.05, d=6, seed=2, feature_sep=1.0)
        h = train_target(g, np.arange(g.n), target_config("SAGE", 6, 3), TrainConfig(epochs=30, seed=1))
        best = max(r["val_acc"] for r in h.training_log)
        chosen = [r for r in h.training_log if r.get("best")][-1]
        assert chosen["val_acc"] == best

    def test_missing_classes_rejected(self):
        g = generate_sbm((10, 10), 0.5, 0.1, d=3, seed=0)
        with pytest.raises(ValidationError):
            train_target(g, np.arange(10), target_config("GIN", 3, 2), TrainConfig(epochs=1))


class TestHead:
    def test_one_hot_embeddings(self):
        y = np.tile(np.arange(4), 10)
        head = train_classifier_head(np.eye(4)[y], y, seed=0)
        assert (argmax_lowest(head.scores(np.eye(4)[y])) == y).mean() == 1.0

    def test_random_embeddings_beat_chance(self):
        rng = np.random.default_rng(0)
        z, y = rng.normal(size=(100, 16)), np.tile(np.arange(5), 20)
        head = train_classifier_head(z, y, seed=0)
        assert (argmax_lowest(head.scores(z)) == y).mean() > 0.2

    def test_gaussian_blobs_held_out(self):
        rng = np.random.default_rng(1)
        centers = rng.normal(size=(5, 8))
        centers *= 5.0 / np.min([np.linalg.norm(a - b) for i, a in enumerate(centers) for b in centers[i + 1:]])
        y = np.repeat(np.arange(5), 60)
        # nearest centers are 5 sigma apart, sigma = 1
        z = centers[y] + rng.normal(size=(300, 8))
        idx = rng.permutation(300)
        tr, te = idx[:200], idx[200:]
        head = train_classifier_head(z[tr], y[tr], seed=0)
        assert (argmax_lowest(head.scores(z[te])) == y[te]).mean() > 0.95

    def test_single_class_rejected(self):
        with pytest.raises(ValidationError):
            train_classifier_head(np.zeros((5, 2)), np.zeros(5, dtype=int))

    def test_round_trip(self, tmp_path):
        y = np.array([0, 1, 2, 1])
        head = train_classifier_head(np.eye(3)[y], y, epochs=3)
        head2 = ClassifierHead.load(head.save(tmp_path / "h"))
        assert np.array_equal(head.scores(np.eye(3)), head2.scores(np.eye(3)))


class TestPredict:
    def test_argmax_and_ties(self):
        assert argmax_lowest([[0.2, 0.7, 0.1]]).tolist() == [1]
        assert argmax_lowest([[0.5, 0.5]]).tolist() == [0]

    def test_compositional(self):
        g = erdos_renyi(30, 0.2, seed=5, d=4)
        h = ModelHandle.create(target_config("GIN", 4, 3), seed=0)
        nodes = np.random.default_rng(0).choice(30, 20, replace=False)
        manual = np.argmax(h.forward(g)[nodes], axis=1)
        assert np.array_equal(predict(h, None, g, nodes), manual)

    def test_surrogate_needs_head(self):
        g = erdos_renyi(5, 0.5, seed=0, d=2)
        with pytest.raises(ValidationError):
            predict(ModelHandle.create(surrogate_config("GIN", 2, 3)), None, g)
