"""Surrogate training from one round of oracle responses.

Two objectives are available. ``contrastive`` projects the cached responses
``R`` and the surrogate outputs on a freshly augmented view through separate
(or shared) projection heads and pulls matching nodes together. ``rmse``
regresses raw surrogate outputs onto ``R`` on the clean graph.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from sklearn.metrics import f1_score

from .augment import AugmentConfig, AugmentedView, augmented_view, spectral_augment
from .errors import SpectralAugmentError, ValidationError
from .gnn import Linear, ModelHandle, Structure, layer_messages, surrogate_config
from .graph import Graph
from .oracle import ResponseKind
from .training import ClassifierHead, epoch_seed, predict, train_classifier_head

log = logging.getLogger(__name__)

LOSS_KINDS = ("contrastive", "rmse")
INTRA_MODES = ("y", "x", "none")


def cosine_similarity(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    nx, ny = np.linalg.norm(x), np.linalg.norm(y)
    if nx == 0 or ny == 0:
        log.debug("cosine similarity with a zero vector taken as 0")
        return 0.0
    return float(np.clip(x @ y / (nx * ny), -1.0, 1.0))


def _unit_rows(Z: torch.Tensor) -> torch.Tensor:
    norm = Z.norm(dim=1, keepdim=True)
    # zero rows stay zero, so their similarities are 0
    return Z / torch.where(norm > 0, norm, torch.ones_like(norm))


def _directional(x: torch.Tensor, y: torch.Tensor, tau: float, intra: torch.Tensor | None) -> torch.Tensor:
    cross = x @ y.T / tau
    terms = [cross]
    if intra is not None:
        eye = torch.eye(x.shape[0], dtype=torch.bool)
        terms.append((intra @ intra.T / tau).masked_fill(eye, float("-inf")))
    return torch.diagonal(cross) - torch.logsumexp(torch.cat(terms, dim=1), dim=1)


def contrastive_loss(T: torch.Tensor, S: torch.Tensor, tau: float = 1.0, intra: str = "y") -> torch.Tensor:
    """Symmetrized node-level contrastive loss with cosine similarity.

    Each direction ``l(x, y)`` scores the positive pair ``(x_i, y_i)`` against
    every ``y_k`` and against the other rows of one view. ``intra`` picks that
    view: ``"y"`` (the other rows of ``y``), ``"x"`` (the other rows of the
    anchor view) or ``"none"``.
    """
    T = torch.as_tensor(T)
    S = torch.as_tensor(S)
    if T.shape != S.shape or T.ndim != 2:
        raise ValidationError(f"T and S must be matrices of equal shape, got {tuple(T.shape)} and {tuple(S.shape)}")
    if T.shape[0] == 0:
        raise ValidationError("contrastive loss needs at least one node")
    if tau <= 0:
        raise ValidationError("tau must be positive")
    if intra not in INTRA_MODES:
        raise ValidationError(f"intra must be one of {INTRA_MODES}")
    t, s = _unit_rows(T), _unit_rows(S)
    pick = {"y": (s, t), "x": (t, s), "none": (None, None)}[intra]
    l_ts = _directional(t, s, tau, pick[0])
    l_st = _directional(s, t, tau, pick[1])
    return -(l_ts + l_st).sum() / (2 * T.shape[0])


def rmse_alignment_loss(R, Hs) -> torch.Tensor:
    R = torch.as_tensor(R)
    Hs = torch.as_tensor(Hs)
    if R.shape != Hs.shape:
        raise ValidationError(f"shape mismatch: {tuple(R.shape)} vs {tuple(Hs.shape)}")
    return torch.sqrt(torch.mean((Hs - R.to(Hs.dtype)) ** 2))


class ProjectionHead(nn.Module):
    def __init__(self, in_dim: int, out_dim: int = 128, seed: int = 0):
        super().__init__()
        self.lin = Linear(in_dim, out_dim, torch.Generator().manual_seed(int(seed)))

    def forward(self, z):
        return F.elu(self.lin(z))


@dataclass(frozen=True)
class StealConfig:
    response_kind: str = "prediction"
    surrogate_arch: str = "GIN"
    loss_kind: str = "contrastive"
    tau: float = 1.0
    epochs: int = 200
    learning_rate: float = 1e-3
    projection_dim: int = 128
    shared_head: bool = False
    intra: str = "y"
    # number of spectral views computed up front and cycled through; classical noise is fresh each epoch
    spectral_pool: int = 8
    use_spectral: bool = True
    head_epochs: int = 300
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    seed: int = 0

    def __post_init__(self):
        ResponseKind.parse(self.response_kind)
        if self.loss_kind not in LOSS_KINDS:
            raise ValidationError(f"loss_kind must be one of {LOSS_KINDS}")
        if self.intra not in INTRA_MODES:
            raise ValidationError(f"intra must be one of {INTRA_MODES}")
        if self.tau <= 0:
            raise ValidationError("tau must be positive")
        if self.epochs <= 0 or self.learning_rate <= 0 or self.head_epochs <= 0:
            raise ValidationError("epochs and learning rates must be positive")
        if self.spectral_pool < 1:
            raise ValidationError("spectral_pool must be at least 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> StealConfig:
        d = dict(d)
        if isinstance(d.get("augment"), dict):
            d["augment"] = AugmentConfig(**d["augment"])
        return cls(**d)


@dataclass(frozen=True)
class StealResult:
    surrogate: ModelHandle
    head: ClassifierHead | None
    queries_used: int
    loss_curve: tuple[float, ...]
    config: StealConfig
    query_nodes: tuple[int, ...] = ()

    def save(self, path) -> Path:
        path = Path(path)
        self.surrogate.save(path)
        if self.head is not None:
            self.head.save(path / "head")
        meta = {
            "config": self.config.to_dict(),
            "queriesUsed": self.queries_used,
            "finalLoss": self.loss_curve[-1] if self.loss_curve else None,
            "lossCurve": list(self.loss_curve),
            "queryNodes": list(self.query_nodes),
        }
        (path / "steal_meta.json").write_text(json.dumps(meta, indent=2) + "\n")
        return path

    @classmethod
    def load(cls, path) -> StealResult:
        path = Path(path)
        meta = json.loads((path / "steal_meta.json").read_text())
        head = ClassifierHead.load(path / "head") if (path / "head").exists() else None
        return cls(ModelHandle.load(path), head, int(meta["queriesUsed"]),
                   tuple(meta["lossCurve"]), StealConfig.from_dict(meta["config"]), tuple(meta["queryNodes"]))


def query_responses(oracle, graph: Graph, nodes, kind) -> np.ndarray:
    """One oracle call covering every node in ``nodes``."""
    return np.asarray(oracle.answer_query(graph, nodes, kind), dtype=np.float64)


def spectral_pool(graph: Graph, cfg: StealConfig, max_tries: int | None = None) -> list[AugmentedView]:
    """Up to ``cfg.spectral_pool`` spectral views, trying seeds derived from ``cfg.seed`` in order.

    Seeds whose optimization ends without a positive margin are skipped; at
    most ``max_tries`` (default three times the pool size) seeds are tried.
    """
    views, failed = [], []
    tries = 3 * cfg.spectral_pool if max_tries is None else max_tries
    for i in range(tries):
        if len(views) == cfg.spectral_pool:
            break
        acfg = cfg.augment.with_seed(epoch_seed(cfg.seed, i, stream=7))
        try:
            views.append(spectral_augment(graph, acfg))
        except SpectralAugmentError as exc:
            failed.append(exc.best_margin)
    if failed:
        log.info("%d spectral seeds failed (best margin %.3g)", len(failed), max(failed))
    if not views:
        log.warning("no spectral view reached a positive margin; classical augmentation only")
    return views


def train_surrogate(graph: Graph, nodes, responses, labels, cfg: StealConfig,
                    queries_used: int | None = None) -> StealResult:
    """Fit a surrogate to precomputed responses for ``nodes`` of ``graph``; never queries an oracle."""
    nodes = np.asarray(nodes, dtype=np.int64)
    R = torch.as_tensor(np.asarray(responses), dtype=torch.float32)
    if R.ndim != 2 or R.shape[0] != nodes.size:
        raise ValidationError("responses must have one row per query node")
    mcfg = surrogate_config(cfg.surrogate_arch, graph.d, int(R.shape[1]))
    surrogate = ModelHandle.create(mcfg, seed=cfg.seed)
    model = surrogate.module
    params = list(model.parameters())
    idx = torch.from_numpy(nodes)

    contrastive = cfg.loss_kind == "contrastive"
    if contrastive:
        head_t = ProjectionHead(R.shape[1], cfg.projection_dim, seed=cfg.seed + 1)
        head_s = head_t if cfg.shared_head else ProjectionHead(R.shape[1], cfg.projection_dim, seed=cfg.seed + 2)
        params += list(head_t.parameters()) + ([] if cfg.shared_head else list(head_s.parameters()))
        pool = spectral_pool(graph, cfg) if cfg.use_spectral else []
    clean = Structure.from_graph(graph)
    x_clean = torch.as_tensor(graph.X, dtype=torch.float32)
    opt = torch.optim.Adam(params, lr=cfg.learning_rate)
    gen = torch.Generator().manual_seed(cfg.seed)

    curve = []
    for epoch in range(cfg.epochs):
        model.train()
        sample_seed = epoch_seed(cfg.seed, epoch)
        if contrastive:
            base = pool[epoch % len(pool)] if pool else AugmentedView.identity(graph)
            view = augmented_view(graph, cfg.augment.with_seed(epoch_seed(cfg.seed, epoch, stream=3)), spectral=base)
            structure, x = view.structure(), torch.as_tensor(view.Xprime, dtype=torch.float32)
        else:
            structure, x = clean, x_clean
        _, out = model(x, layer_messages(structure, mcfg.fanouts, sample_seed), gen)
        Hs = out[idx]
        loss = contrastive_loss(head_t(R), head_s(Hs), cfg.tau, cfg.intra) if contrastive else rmse_alignment_loss(R, Hs)
        opt.zero_grad()
        loss.backward()
        opt.step()
        curve.append(float(loss.item()))

    model.eval()
    surrogate.training_log = [{"epoch": i, "loss": v} for i, v in enumerate(curve)]
    feats = surrogate.forward(graph, nodes)
    head = train_classifier_head(feats, np.asarray(labels), num_classes=graph.num_classes,
                                 seed=cfg.seed, epochs=cfg.head_epochs)
    used = int(nodes.size if queries_used is None else queries_used)
    return StealResult(surrogate, head, used, tuple(curve), cfg, tuple(nodes.tolist()))


def steal(oracle, query_graph: Graph, cfg: StealConfig, query_nodes=None) -> StealResult:
    """Query every node once, then train the surrogate on the cached responses.

    ``query_nodes`` restricts the queried set (budget sweeps); the surrogate
    still sees the whole query graph as message-passing context.
    """
    nodes = np.arange(query_graph.n) if query_nodes is None else np.sort(np.asarray(query_nodes, dtype=np.int64))
    before = oracle.ledger().total_node_queries
    R = query_responses(oracle, query_graph, nodes, cfg.response_kind)
    used = oracle.ledger().total_node_queries - before
    return train_surrogate(query_graph, nodes, R, query_graph.C[nodes], cfg, queries_used=used)


@dataclass(frozen=True)
class Evaluation:
    accuracy: float
    fidelity: float
    f1: float


def classification_metrics(pred_s, pred_t, labels) -> Evaluation:
    pred_s, pred_t, labels = (np.asarray(a, dtype=np.int64) for a in (pred_s, pred_t, labels))
    acc = float(np.mean(pred_s == labels))
    fid = float(np.mean(pred_s == pred_t))
    f1 = float(f1_score(labels, pred_s, average="macro", zero_division=0))
    return Evaluation(acc, fid, f1)


def evaluate_surrogate(result: StealResult, target: ModelHandle, test_graph: Graph, labels=None) -> Evaluation:
    """Accuracy, fidelity and macro-F1 on every node of ``test_graph``.

    Target predictions come straight from the victim model, outside any oracle ledger.
    """
    labels = test_graph.C if labels is None else labels
    pred_s = predict(result.surrogate, result.head, test_graph)
    pred_t = predict(target, None, test_graph)
    return classification_metrics(pred_s, pred_t, labels)


def with_loss(cfg: StealConfig, loss_kind: str) -> StealConfig:
    return replace(cfg, loss_kind=loss_kind)
