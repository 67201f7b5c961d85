"""Supervised training of victim models and MLP classification heads."""

from __future__ import annotations

import copy
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ValidationError
from .gnn import GNN, Linear, ModelConfig, ModelHandle, Structure, layer_messages
from .graph import Graph

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    epochs: int = 200
    seed: int = 0
    validation_frac: float = 0.1
    loss_kind: str = "crossEntropy"

    def __post_init__(self):
        if self.epochs <= 0 or self.learning_rate <= 0:
            raise ValidationError("epochs and learning_rate must be positive")


def epoch_seed(seed: int, epoch: int, stream: int = 0) -> int:
    """Independent per-epoch sampling seed."""
    return int(np.random.SeedSequence([seed, stream, epoch]).generate_state(1)[0])


def train_target(graph: Graph, train_nodes, config: ModelConfig, tcfg: TrainConfig = TrainConfig()) -> ModelHandle:
    """Cross-entropy training on ``train_nodes``; returns the best-validation-accuracy snapshot.

    A seeded 10% (``validation_frac``) of ``train_nodes`` is held out for model selection.
    Accuracy ties go to the lower validation loss, then to the earlier epoch.
    """
    if config.role != "target":
        raise ValidationError("train_target needs a target-role config")
    train_nodes = np.asarray(train_nodes, dtype=np.int64)
    k = int(graph.num_classes)
    if np.unique(graph.C[train_nodes]).size < k:
        raise ValidationError(f"training nodes cover fewer than {k} classes")

    rng = np.random.default_rng(tcfg.seed)
    perm = rng.permutation(train_nodes)
    n_val = max(1, int(round(tcfg.validation_frac * perm.size)))
    val_idx, fit_idx = np.sort(perm[:n_val]), np.sort(perm[n_val:])

    handle = ModelHandle.create(config, seed=tcfg.seed)
    model = handle.module
    structure = Structure.from_graph(graph)
    x = torch.as_tensor(graph.X, dtype=torch.float32)
    y = torch.as_tensor(graph.C, dtype=torch.long)
    fit_t, val_t = torch.from_numpy(fit_idx), torch.from_numpy(val_idx)
    full_msgs = layer_messages(structure, config.fanouts, None)
    gen = torch.Generator().manual_seed(tcfg.seed)
    opt = torch.optim.Adam(model.parameters(), lr=tcfg.learning_rate)

    best, best_state, records = (-1.0, -np.inf), None, []
    for epoch in range(tcfg.epochs):
        model.train()
        msgs = layer_messages(structure, config.fanouts, epoch_seed(tcfg.seed, epoch))
        _, logits = model(x, msgs, gen)
        loss = F.cross_entropy(logits[fit_t], y[fit_t])
        opt.zero_grad()
        loss.backward()
        opt.step()

        model.eval()
        with torch.no_grad():
            _, logits = model(x, full_msgs)
            pred = logits.argmax(dim=1)
            train_acc = (pred[fit_t] == y[fit_t]).float().mean().item()
            val_acc = (pred[val_t] == y[val_t]).float().mean().item()
            val_loss = F.cross_entropy(logits[val_t], y[val_t]).item()
        records.append({"epoch": epoch, "loss": float(loss.item()), "train_acc": train_acc,
                        "val_acc": val_acc, "val_loss": val_loss})
        if (val_acc, -val_loss) > best:
            best, best_state = (val_acc, -val_loss), copy.deepcopy(model.state_dict())
            records[-1]["best"] = True

    model.load_state_dict(best_state)
    handle.training_log = records
    log.info("target %s trained: best val acc %.3f", config.arch, best[0])
    return handle


class ClassifierHead(nn.Module):
    """Two-layer MLP (hidden 100) mapping frozen embeddings to class logits."""

    def __init__(self, in_dim: int, num_classes: int, hidden: int = 100, seed: int = 0):
        super().__init__()
        gen = torch.Generator().manual_seed(int(seed))
        self.in_dim, self.num_classes, self.hidden = in_dim, num_classes, hidden
        self.fc1 = Linear(in_dim, hidden, gen)
        self.fc2 = Linear(hidden, num_classes, gen)

    def forward(self, z):
        return self.fc2(F.relu(self.fc1(z)))

    def scores(self, embeddings) -> np.ndarray:
        self.eval()
        with torch.no_grad():
            return self(torch.as_tensor(np.asarray(embeddings), dtype=torch.float32)).numpy()

    def save(self, path) -> Path:
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        meta = {"in_dim": self.in_dim, "num_classes": self.num_classes, "hidden": self.hidden}
        (path / "head.json").write_text(json.dumps(meta) + "\n")
        torch.save(self.state_dict(), path / "head.pt")
        return path

    @classmethod
    def load(cls, path) -> ClassifierHead:
        path = Path(path)
        head = cls(**json.loads((path / "head.json").read_text()))
        head.load_state_dict(torch.load(path / "head.pt", weights_only=True))
        return head


def train_classifier_head(
    embeddings, labels, num_classes: int | None = None, seed: int = 0,
    epochs: int = 300, learning_rate: float = 1e-3,
) -> ClassifierHead:
    """Full-batch Adam on cross-entropy; ``embeddings`` are treated as constants."""
    z = torch.as_tensor(np.asarray(embeddings), dtype=torch.float32).detach()
    y = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    if z.shape[0] != y.shape[0]:
        raise ValidationError("embeddings and labels differ in length")
    if torch.unique(y).numel() < 2:
        raise ValidationError("classifier head needs at least two classes")
    k = int(num_classes if num_classes is not None else y.max().item() + 1)
    head = ClassifierHead(z.shape[1], k, seed=seed)
    opt = torch.optim.Adam(head.parameters(), lr=learning_rate)
    head.train()
    for _ in range(epochs):
        loss = F.cross_entropy(head(z), y)
        opt.zero_grad()
        loss.backward()
        opt.step()
    head.eval()
    return head


def argmax_lowest(scores) -> np.ndarray:
    """Row-wise argmax; ties go to the lowest class index."""
    return np.argmax(np.asarray(scores), axis=1)


def predict(model: ModelHandle, head: ClassifierHead | None, graph: Graph, nodes=None, seed: int | None = None) -> np.ndarray:
    """Class predictions; surrogates need ``head`` on top of their embeddings."""
    out = model.forward(graph, nodes, seed)
    if head is not None:
        out = head.scores(out)
    elif model.config.role == "surrogate":
        raise ValidationError("a classifier head is required for embedding-output models")
    return argmax_lowest(out)
