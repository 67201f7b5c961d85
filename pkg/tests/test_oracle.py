from __future__ import annotations

import json

import numpy as np
import pytest

from gnnsteal.errors import BudgetExceededError, ValidationError
from gnnsteal.gnn import ModelHandle, target_config
from gnnsteal.graph import generate_sbm
from gnnsteal.oracle import DefenseConfig, ResponseKind, TSNEParams, VictimOracle, apply_defense
from gnnsteal.tsne import tsne_project

from .conftest import erdos_renyi


@pytest.fixture(scope="module")
def victim():
    return ModelHandle.create(target_config("GIN", 6, 3), seed=0)


@pytest.fixture(scope="module")
def qgraph():
    return generate_sbm((40, 40, 40), 0.1, 0.01, d=6, seed=1)


FAST_TSNE = TSNEParams(perplexity=10, iterations=150)


class TestAnswerQuery:
    def test_posteriors_normalized(self, victim, qgraph):
        out = VictimOracle(victim).answer_query(qgraph, np.arange(qgraph.n), "prediction")
        assert out.shape == (qgraph.n, 3)
        assert np.all(np.abs(out.sum(axis=1) - 1.0) <= 1e-6)

    def test_embedding_is_penultimate(self, victim, qgraph):
        out = VictimOracle(victim).answer_query(qgraph, [0, 5, 7], ResponseKind.EMBEDDING)
        assert np.allclose(out, victim.embed(qgraph, [0, 5, 7]))
        assert out.shape == (3, 128)

    def test_projection_is_2d(self, victim, qgraph):
        out = VictimOracle(victim, tsne=FAST_TSNE).answer_query(qgraph, np.arange(60), "projection")
        assert out.shape == (60, 2)
        assert np.allclose(out.mean(axis=0), 0, atol=1e-8)

    def test_accounting(self, victim, qgraph):
        o = VictimOracle(victim)
        o.answer_query(qgraph, np.arange(100), "prediction")
        o.answer_query(qgraph, np.arange(50), "embedding")
        snap = o.ledger()
        assert snap.total_node_queries == 150
        assert sum(snap.per_node_counts.values()) == 150
        assert snap.per_node_counts[0] == 2 and snap.per_node_counts[99] == 1

    def test_budget(self, victim, qgraph):
        o = VictimOracle(victim, budget=100)
        o.answer_query(qgraph, np.arange(80), "prediction")
        with pytest.raises(BudgetExceededError):
            o.answer_query(qgraph, np.arange(30), "prediction")
        assert o.ledger().total_node_queries == 80
        o.answer_query(qgraph, np.arange(20), "prediction")
        with pytest.raises(BudgetExceededError):
            o.answer_query(qgraph, [0], "prediction")
        assert o.ledger().total_node_queries == 100

    def test_unknown_kind(self, victim, qgraph):
        with pytest.raises(ValidationError):
            VictimOracle(victim).answer_query(qgraph, [0], "gradients")

    def test_sigma_zero_identical(self, victim, qgraph):
        a = VictimOracle(victim).answer_query(qgraph, np.arange(50), "embedding")
        b = VictimOracle(victim, defense=DefenseConfig(sigma=0.0, seed=3)).answer_query(qgraph, np.arange(50), "embedding")
        assert a.tobytes() == b.tobytes()

    def test_defense_skips_predictions(self, victim, qgraph):
        a = VictimOracle(victim).answer_query(qgraph, np.arange(50), "prediction")
        b = VictimOracle(victim, defense=DefenseConfig(sigma=1.0)).answer_query(qgraph, np.arange(50), "prediction")
        assert np.array_equal(a, b)

    def test_defense_noises_embeddings(self, victim, qgraph):
        a = VictimOracle(victim).answer_query(qgraph, np.arange(50), "embedding")
        b = VictimOracle(victim, defense=DefenseConfig(sigma=0.5)).answer_query(qgraph, np.arange(50), "embedding")
        assert 0.4 < np.std(b - a) < 0.6

    def test_subgraph_evaluation_matches_batched(self, qgraph):
        for arch in ("GIN", "GAT", "SAGE"):
            model = ModelHandle.create(target_config(arch, 6, 3), seed=1)
            nodes = np.arange(0, qgraph.n, 7)
            a = VictimOracle(model).answer_query(qgraph, nodes, "prediction")
            b = VictimOracle(model, exact_subgraphs=True).answer_query(qgraph, nodes, "prediction")
            assert np.allclose(a, b, atol=1e-6)

    def test_interface_surface(self, victim):
        public = sorted(a for a in dir(VictimOracle(victim)) if not a.startswith("_"))
        assert public == ["answer_query", "ledger"]
        with pytest.raises(AttributeError):
            VictimOracle(victim).model  # noqa: B018

    def test_ledger_snapshot_read_only(self, victim, qgraph):
        o = VictimOracle(victim)
        o.answer_query(qgraph, [1, 2], "prediction")
        with pytest.raises(TypeError):
            o.ledger().per_node_counts[1] = 0

    def test_audit_log(self, victim, qgraph, tmp_path):
        path = tmp_path / "audit.jsonl"
        o = VictimOracle(victim, audit_log=path, defense=DefenseConfig(sigma=0.1))
        o.answer_query(qgraph, np.arange(10), "embedding")
        o.answer_query(qgraph, np.arange(5), "prediction")
        recs = [json.loads(l) for l in path.read_text().splitlines()]
        assert [r["runningTotal"] for r in recs] == [10, 15]
        assert set(recs[0]) == {"timestamp", "kind", "nodeCount", "sigma", "runningTotal"}


class TestDefense:
    def test_identity(self):
        x = np.random.default_rng(0).normal(size=(4, 3))
        assert np.array_equal(apply_defense(x, DefenseConfig(0.0)), x)

    def test_noise_std(self):
        x = np.zeros(100_000)
        out = apply_defense(x, DefenseConfig(1.0, seed=2))
        assert 0.99 <= np.std(out - x) <= 1.01

    def test_deterministic(self):
        x = np.zeros((10, 10))
        assert np.array_equal(apply_defense(x, DefenseConfig(1.0, seed=5)), apply_defense(x, DefenseConfig(1.0, seed=5)))

    def test_negative_sigma(self):
        with pytest.raises(ValidationError):
            DefenseConfig(-1.0)


def two_clusters(m_each=40, dim=64, seed=0):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(m_each, dim))
    b = rng.normal(size=(m_each, dim)) + 20.0
    return np.vstack([a, b]), np.repeat([0, 1], m_each)


class TestTSNE:
    def test_cluster_separation(self):
        X, lab = two_clusters(100)
        Y = tsne_project(X, seed=0)
        c0, c1 = Y[lab == 0].mean(0), Y[lab == 1].mean(0)
        intra = np.mean(np.r_[np.linalg.norm(Y[lab == 0] - c0, axis=1), np.linalg.norm(Y[lab == 1] - c1, axis=1)])
        assert np.linalg.norm(c0 - c1) > 3 * intra

    def test_duplicates_coincide(self):
        rng = np.random.default_rng(1)
        X = rng.normal(size=(40, 5))
        X[7] = X[3]
        init = rng.normal(0, 1e-4, size=(40, 2))
        init[7] = init[3]
        Y = tsne_project(X, perplexity=8, iterations=200, init=init)
        assert np.allclose(Y[3], Y[7], atol=1e-8)

    def test_kl_settles(self):
        X, _ = two_clusters(30, 16, seed=3)
        hist = []
        tsne_project(X, perplexity=10, iterations=500, seed=0, history=hist)
        tail = np.array(hist[-50:])
        assert np.all(np.diff(tail) <= 1e-3)

    def test_too_few_points(self):
        with pytest.raises(ValidationError):
            tsne_project(np.zeros((30, 3)), perplexity=10)

    def test_deterministic(self):
        X, _ = two_clusters(20, 8)
        assert np.array_equal(tsne_project(X, 10, 100, seed=4), tsne_project(X, 10, 100, seed=4))

    def test_perplexity_calibrated(self):
        from gnnsteal.tsne import conditional_affinities, squared_distances
        X = np.random.default_rng(0).normal(size=(60, 4))
        P = conditional_affinities(squared_distances(X), 12.0)
        ent = -np.sum(np.where(P > 0, P * np.log(np.where(P > 0, P, 1)), 0), axis=1)
        assert np.allclose(np.exp(ent), 12.0, rtol=1e-3)
        assert np.allclose(P.sum(axis=1), 1.0)
