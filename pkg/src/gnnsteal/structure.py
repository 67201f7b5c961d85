"""Adjacency inference for query graphs whose edges are unknown (Type II attacks)."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch

from .errors import ValidationError
from .graph import Graph, from_dense
from .stealer import StealConfig, contrastive_loss, query_responses, rmse_alignment_loss, train_surrogate

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class StructureConfig:
    k: int = 20
    heads: int = 4
    refine_iters: int = 3
    smoothness_weight: float = 0.2
    sparsity_weight: float = 0.01
    connectivity_weight: float = 0.05
    lambda_mix: float = 0.5
    learning_rate: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.k < 1 or self.heads < 1 or self.refine_iters < 0:
            raise ValidationError("k and heads must be >= 1, refine_iters >= 0")
        if min(self.smoothness_weight, self.sparsity_weight, self.connectivity_weight) < 0:
            raise ValidationError("loss weights must be non-negative")
        if not 0.0 <= self.lambda_mix <= 1.0:
            raise ValidationError("lambda_mix must lie in [0, 1]")


def _similarity(X: torch.Tensor, W: torch.Tensor) -> torch.Tensor:
    # mean over heads of cosine(w_h * x_i, w_h * x_j); zero rows give zero similarity
    Z = X[None, :, :] * W[:, None, :]
    norm = Z.norm(dim=2, keepdim=True)
    Z = Z / torch.where(norm > 0, norm, torch.ones_like(norm))
    return (Z @ Z.transpose(1, 2)).mean(dim=0)


def _topk_mask(S: np.ndarray, k: int) -> np.ndarray:
    n = S.shape[0]
    S = S.copy()
    np.fill_diagonal(S, -np.inf)
    # stable sort on -S keeps the lowest index first among ties
    order = np.argsort(-S, axis=1, kind="stable")[:, :k]
    mask = np.zeros((n, n), dtype=bool)
    mask[np.arange(n)[:, None], order] = True
    return mask


def _sparsify(S: torch.Tensor, mask: np.ndarray) -> torch.Tensor:
    A = torch.clamp(S, min=0.0) * torch.from_numpy(mask).to(S.dtype)
    return torch.maximum(A, A.T)


def knn_init(X, cfg: StructureConfig = StructureConfig(), head_weights=None) -> np.ndarray:
    """Weighted kNN graph from mean multi-head cosine similarity.

    Heads start from all-ones weights. Each row keeps its top ``k`` non-self
    entries (ties to the lowest index), negative similarities are cut to zero
    and the result is symmetrized by elementwise max.
    """
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    if n < cfg.k + 1:
        raise ValidationError(f"kNN with k={cfg.k} needs at least {cfg.k + 1} nodes, got {n}")
    zero = ~np.any(X, axis=1)
    if zero.any():
        log.warning("%d all-zero feature rows get zero similarity", int(zero.sum()))
    W = torch.ones(cfg.heads, X.shape[1], dtype=torch.float64) if head_weights is None else torch.as_tensor(head_weights)
    with torch.no_grad():
        S = _similarity(torch.from_numpy(X), W)
        A = _sparsify(S, _topk_mask(S.numpy(), cfg.k))
    return A.numpy()


def _laplacian_smoothness(A: torch.Tensor, X: torch.Tensor) -> torch.Tensor:
    L = torch.diag(A.sum(1)) - A
    return torch.trace(X.T @ L @ X) / (X.norm() ** 2)


def refine_structure(A0, X, responses, cfg: StructureConfig = StructureConfig(), nodes=None,
                     loss_kind: str = "rmse", tau: float = 1.0, trace: list | None = None) -> np.ndarray:
    """Iteratively relearn the graph from features and cached responses.

    Each round rebuilds the similarity graph from the current head weights,
    mixes it with ``A0`` and takes one Adam step on the joint loss: alignment of
    a one-layer GCN to ``responses`` plus smoothness, sparsity and connectivity
    terms. No oracle is involved. ``trace`` receives the joint loss per round.
    """
    A0 = np.asarray(A0, dtype=np.float64)
    if cfg.refine_iters == 0:
        return A0.copy()
    X_t = torch.as_tensor(np.asarray(X), dtype=torch.float64)
    R = torch.as_tensor(np.asarray(responses), dtype=torch.float64)
    n, d = X_t.shape
    idx = torch.arange(n) if nodes is None else torch.as_tensor(np.asarray(nodes), dtype=torch.long)
    if R.shape[0] != idx.numel():
        raise ValidationError("responses must have one row per node")
    A0_t = torch.from_numpy(A0)

    gen = torch.Generator().manual_seed(cfg.seed)
    W_heads = torch.ones(cfg.heads, d, dtype=torch.float64, requires_grad=True)
    bound = (6.0 / (d + R.shape[1])) ** 0.5
    W_gcn = ((torch.rand(d, R.shape[1], generator=gen, dtype=torch.float64) * 2 - 1) * bound).requires_grad_()
    opt = torch.optim.Adam([W_heads, W_gcn], lr=cfg.learning_rate)

    def mixed() -> torch.Tensor:
        S = _similarity(X_t, W_heads)
        learned = _sparsify(S, _topk_mask(S.detach().numpy(), cfg.k))
        return cfg.lambda_mix * learned + (1 - cfg.lambda_mix) * A0_t

    def joint(A: torch.Tensor) -> torch.Tensor:
        Ah = A + torch.eye(n, dtype=A.dtype)
        dinv = Ah.sum(1).rsqrt()
        H = (dinv[:, None] * Ah * dinv[None, :]) @ X_t @ W_gcn
        align = contrastive_loss(R, H[idx], tau) if loss_kind == "contrastive" else rmse_alignment_loss(R, H[idx])
        return (align
                + cfg.smoothness_weight * _laplacian_smoothness(A, X_t)
                + cfg.sparsity_weight * A.abs().mean()
                - cfg.connectivity_weight * torch.log(A.sum(1) + 1e-8).mean())

    last_good = A0.copy()
    for r in range(cfg.refine_iters):
        A = mixed()
        loss = joint(A)
        if not torch.isfinite(loss):
            log.warning("non-finite joint loss in round %d; returning last good graph", r)
            return last_good
        if trace is not None:
            trace.append(float(loss.item()))
        opt.zero_grad()
        loss.backward()
        opt.step()
        last_good = A.detach().numpy().copy()
    with torch.no_grad():
        A = mixed()
        if trace is not None:
            trace.append(float(joint(A).item()))
    out = A.numpy().copy()
    np.fill_diagonal(out, 0.0)
    return np.maximum(out, out.T)


def learned_graph(A, template: Graph, name: str | None = None) -> Graph:
    """Graph with ``template``'s nodes and features and weighted edges taken from ``A``."""
    g = from_dense(np.asarray(A), template.X, template.C, name=name or f"{template.name}-learned",
                   num_classes=template.num_classes)
    g.orig_ids = template.orig_ids
    return g


def type2_attack(oracle, query_graph: Graph, steal_cfg: StealConfig,
                 struct_cfg: StructureConfig = StructureConfig(), query_nodes=None):
    """Steal without the query graph's edges.

    Queries are posed on the kNN graph ``A0``; the surrogate then trains on the
    refined graph ``A_Q``. Returns ``(StealResult, learned query graph)``.
    """
    nodes = np.arange(query_graph.n) if query_nodes is None else np.sort(np.asarray(query_nodes, dtype=np.int64))
    A0 = knn_init(query_graph.X, struct_cfg)
    g0 = learned_graph(A0, query_graph, name=f"{query_graph.name}-knn")
    before = oracle.ledger().total_node_queries
    R = query_responses(oracle, g0, nodes, steal_cfg.response_kind)
    used = oracle.ledger().total_node_queries - before
    AQ = refine_structure(A0, query_graph.X, R, struct_cfg, nodes=nodes, loss_kind=steal_cfg.loss_kind, tau=steal_cfg.tau)
    gq = learned_graph(AQ, query_graph)
    result = train_surrogate(gq, nodes, R, query_graph.C[nodes], steal_cfg, queries_used=used)
    return result, gq
