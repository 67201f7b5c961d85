"""Black-box query API around a trained victim model, with budget accounting and a noise defense."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from types import MappingProxyType

import numpy as np
import torch

from .errors import BudgetExceededError, ValidationError
from .gnn import ModelHandle
from .graph import Graph, k_hop_subgraph
from .tsne import tsne_project

log = logging.getLogger(__name__)


class ResponseKind(str, Enum):
    PREDICTION = "prediction"
    EMBEDDING = "embedding"
    PROJECTION = "projection"

    @classmethod
    def parse(cls, value) -> ResponseKind:
        try:
            return cls(value.value if isinstance(value, cls) else str(value).lower())
        except ValueError:
            raise ValidationError(f"unknown response kind {value!r}") from None


@dataclass(frozen=True)
class DefenseConfig:
    sigma: float = 0.0
    applicable_kinds: tuple[str, ...] = ("embedding", "projection")
    seed: int = 0
    # extension hook; posteriors are never noised by default
    noise_predictions: bool = False

    def __post_init__(self):
        if self.sigma < 0:
            raise ValidationError("defense sigma must be non-negative")


def apply_defense(response: np.ndarray, cfg: DefenseConfig) -> np.ndarray:
    """Add i.i.d. N(0, sigma^2) noise per entry; sigma = 0 returns an unchanged copy."""
    response = np.asarray(response)
    if cfg.sigma == 0:
        return response.copy()
    rng = np.random.default_rng(cfg.seed)
    return response + rng.normal(0.0, cfg.sigma, size=response.shape).astype(response.dtype)


@dataclass(frozen=True)
class LedgerSnapshot:
    total_node_queries: int
    per_node_counts: MappingProxyType
    budget: int | None
    batches: int = 0

    @property
    def remaining(self) -> int | None:
        return None if self.budget is None else self.budget - self.total_node_queries


@dataclass
class TSNEParams:
    perplexity: float = 30.0
    iterations: int = 500
    learning_rate: float = 200.0
    seed: int = 0


class VictimOracle:
    """Query interface to a victim model.

    Only :meth:`answer_query` and :meth:`ledger` are public. Each queried node
    counts as one query. Responses are computed from each node's l-hop
    neighborhood (l = victim depth) with full neighborhoods; ``exact_subgraphs``
    evaluates every node on its explicitly extracted subgraph instead of one
    batched pass, which gives the same answer at much higher cost.
    """

    __slots__ = ("_model", "_budget", "_defense", "_tsne", "_total", "_counts",
                 "_batches", "_audit", "_exact")

    def __init__(self, model: ModelHandle, budget: int | None = None,
                 defense: DefenseConfig | None = None, tsne: TSNEParams | None = None,
                 audit_log=None, exact_subgraphs: bool = False):
        self._model = model
        self._budget = budget
        self._defense = defense or DefenseConfig()
        self._tsne = tsne or TSNEParams()
        self._total = 0
        self._counts: dict[int, int] = {}
        self._batches = 0
        self._audit = Path(audit_log) if audit_log else None
        self._exact = exact_subgraphs

    def ledger(self) -> LedgerSnapshot:
        return LedgerSnapshot(self._total, MappingProxyType(dict(self._counts)), self._budget, self._batches)

    def answer_query(self, graph: Graph, nodes, kind) -> np.ndarray:
        kind = ResponseKind.parse(kind)
        nodes = np.asarray(nodes, dtype=np.int64).reshape(-1)
        if self._budget is not None and self._total + nodes.size > self._budget:
            raise BudgetExceededError(int(nodes.size), self._total, self._budget)
        if nodes.size and (nodes.min() < 0 or nodes.max() >= graph.n):
            raise ValidationError("queried node outside the query graph")

        emb, logits = self._evaluate(graph, nodes)
        if kind is ResponseKind.PREDICTION:
            out = torch.softmax(torch.as_tensor(logits, dtype=torch.float64), dim=1).numpy()
        elif kind is ResponseKind.EMBEDDING:
            out = emb.astype(np.float64)
        else:
            out = self._project(emb.astype(np.float64))

        d = self._defense
        if d.sigma > 0 and (kind.value in d.applicable_kinds or (kind is ResponseKind.PREDICTION and d.noise_predictions)):
            batch_cfg = DefenseConfig(d.sigma, d.applicable_kinds, int(np.random.SeedSequence([d.seed, self._batches]).generate_state(1)[0]))
            out = apply_defense(out, batch_cfg)
            if kind is ResponseKind.PREDICTION:
                out = np.clip(out, 0.0, None)
                out /= np.maximum(out.sum(axis=1, keepdims=True), 1e-12)

        ids = nodes if graph.orig_ids is None else graph.orig_ids[nodes]
        for v in ids.tolist():
            self._counts[v] = self._counts.get(v, 0) + 1
        self._total += int(nodes.size)
        self._batches += 1
        if self._audit is not None:
            rec = {"timestamp": time.time(), "kind": kind.value, "nodeCount": int(nodes.size),
                   "sigma": d.sigma, "runningTotal": self._total}
            with open(self._audit, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(rec) + "\n")
        return out

    def _evaluate(self, graph: Graph, nodes: np.ndarray):
        model = self._model
        if not self._exact:
            emb, logits = model.run(graph)
            return emb.numpy()[nodes], logits.numpy()[nodes]
        depth = model.config.num_layers
        embs, outs = [], []
        for v in nodes.tolist():
            sub = k_hop_subgraph(graph, v, depth)
            emb, logits = model.run(sub)
            embs.append(emb.numpy()[sub.center])
            outs.append(logits.numpy()[sub.center])
        width = model.config.embedding_dim
        return (np.array(embs).reshape(-1, width),
                np.array(outs).reshape(-1, model.config.output_dim))

    def _project(self, emb: np.ndarray) -> np.ndarray:
        p = self._tsne
        perplexity = p.perplexity
        if emb.shape[0] <= 3 * perplexity:
            if emb.shape[0] < 4:
                raise ValidationError("projection responses need at least 4 queried nodes")
            perplexity = (emb.shape[0] - 1) / 3.0
            log.warning("t-SNE perplexity lowered to %.2f for a batch of %d nodes", perplexity, emb.shape[0])
        return tsne_project(emb, perplexity, p.iterations, seed=p.seed, learning_rate=p.learning_rate)


def response_dim(kind, model_config) -> int:
    """Width of a response matrix; known to the attacker from the response itself."""
    kind = ResponseKind.parse(kind)
    if kind is ResponseKind.PREDICTION:
        return model_config.output_dim
    if kind is ResponseKind.EMBEDDING:
        return model_config.embedding_dim
    return 2
