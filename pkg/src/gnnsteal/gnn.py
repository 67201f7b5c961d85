"""Inductive GNN architectures (GIN, GAT, GraphSAGE) with per-layer neighbor sampling.

Every layer runs over all nodes of the input graph. A layer receives the node
states ``h`` and a message list ``(dst, src, w)``; self contributions are added
inside the layer. Only dense structures (augmented views) carry diagonal
entries, which arrive as extra weighted self messages.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ShapeError, ValidationError
from .graph import Graph

ARCHS = ("GIN", "GAT", "SAGE")
ROLES = ("target", "surrogate")


@dataclass
class ModelConfig:
    arch: str
    role: str
    in_dim: int
    num_layers: int
    hidden_dim: int
    output_dim: int
    fanouts: tuple[int, ...]
    heads: int = 4
    dropout: float = 0.0
    embedding_dim: int = 128
    aggregator: str = "gcn"

    def __post_init__(self):
        self.arch = self.arch.upper()
        self.fanouts = tuple(int(f) for f in self.fanouts)
        if self.arch not in ARCHS:
            raise ValidationError(f"unknown architecture {self.arch!r}")
        if self.role not in ROLES:
            raise ValidationError(f"unknown role {self.role!r}")
        if self.num_layers != len(self.fanouts):
            raise ValidationError("num_layers must equal len(fanouts)")
        if min(self.in_dim, self.hidden_dim, self.output_dim, self.embedding_dim, self.heads) <= 0:
            raise ValidationError("dimensions must be positive")
        if not 0 <= self.dropout < 1:
            raise ValidationError("dropout must lie in [0, 1)")
        if self.role == "target" and self.arch != "SAGE" and self.num_layers < 2:
            raise ValidationError("GIN/GAT targets need at least 2 layers")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["fanouts"] = list(self.fanouts)
        return d


def target_config(arch: str, in_dim: int, num_classes: int, embedding_dim: int = 128) -> ModelConfig:
    """Victim architectures: GIN/GAT 3 layers fanout 10, SAGE 2 layers fanouts 25/10."""
    arch = arch.upper()
    if arch == "SAGE":
        return ModelConfig("SAGE", "target", in_dim, 2, 128, num_classes, (25, 10),
                           dropout=0.5, embedding_dim=embedding_dim)
    return ModelConfig(arch, "target", in_dim, 3, 128, num_classes, (10, 10, 10),
                       heads=4, dropout=0.5, embedding_dim=embedding_dim)


def surrogate_config(arch: str, in_dim: int, response_dim: int, dropout: float = 0.0) -> ModelConfig:
    """Attacker architectures: 2 layers, fanouts 10/50, hidden 128 then the response size."""
    return ModelConfig(arch.upper(), "surrogate", in_dim, 2, 128, response_dim, (10, 50),
                       heads=4, dropout=dropout)


# ---------------------------------------------------------------- sampling


@dataclass
class Structure:
    """CSR view of a (possibly weighted, possibly signed) graph used for message passing."""

    n: int
    indptr: np.ndarray
    indices: np.ndarray
    weights: np.ndarray

    @classmethod
    def from_graph(cls, graph: Graph) -> Structure:
        a = graph.adjacency()
        return cls(graph.n, a.indptr.astype(np.int64), a.indices.astype(np.int64),
                   a.data.astype(np.float64))

    @classmethod
    def from_dense(cls, A: np.ndarray) -> Structure:
        # diagonal entries become weighted self messages on top of the implicit self term
        A = np.asarray(A, dtype=np.float64)
        rows, cols = np.nonzero(A)
        indptr = np.zeros(A.shape[0] + 1, dtype=np.int64)
        np.add.at(indptr, rows + 1, 1)
        return cls(A.shape[0], np.cumsum(indptr), cols.astype(np.int64), A[rows, cols])

    @property
    def degrees(self) -> np.ndarray:
        return np.diff(self.indptr)

    def all_messages(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        dst = np.repeat(np.arange(self.n), self.degrees)
        return dst, self.indices, self.weights

    def sample(self, fanout: int, rng: np.random.Generator | None):
        """Up to ``fanout`` neighbors per node, uniformly without replacement.

        Returns messages in canonical CSR order; with ``rng`` None, or when no
        node exceeds the fanout, every neighbor is kept and no randomness is drawn.
        """
        dst, src, w = self.all_messages()
        deg = self.degrees
        if rng is None or deg.size == 0 or deg.max() <= fanout:
            return dst, src, w
        keys = rng.random(src.size)
        order = np.lexsort((keys, dst))
        rank = np.arange(src.size) - self.indptr[dst[order]]
        keep = np.sort(order[rank < fanout])
        return dst[keep], src[keep], w[keep]


def layer_messages(structure: Structure, fanouts, seed: int | None):
    rng = None if seed is None else np.random.default_rng(seed)
    out = []
    for f in fanouts:
        dst, src, w = structure.sample(f, rng)
        out.append((torch.from_numpy(dst), torch.from_numpy(src), torch.from_numpy(w)))
    return out


# ---------------------------------------------------------------- layers


def glorot_(t: torch.Tensor, gen: torch.Generator, fan_in: int, fan_out: int) -> None:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    with torch.no_grad():
        t.copy_(torch.rand(t.shape, generator=gen, dtype=t.dtype) * 2 * bound - bound)


class Linear(nn.Module):
    def __init__(self, in_dim: int, out_dim: int, gen: torch.Generator):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(out_dim, in_dim))
        self.bias = nn.Parameter(torch.zeros(out_dim))
        glorot_(self.weight, gen, in_dim, out_dim)

    def forward(self, x):
        return x @ self.weight.T + self.bias


def scatter_sum(values: torch.Tensor, index: torch.Tensor, n: int) -> torch.Tensor:
    out = values.new_zeros((n,) + tuple(values.shape[1:]))
    return out.index_add(0, index, values)


class GINLayer(nn.Module):
    """``Linear(h_v + sum_u w_uv h_u)`` with epsilon fixed at 0."""

    def __init__(self, in_dim, out_dim, gen):
        super().__init__()
        self.lin = Linear(in_dim, out_dim, gen)

    def forward(self, h, dst, src, w):
        w = w.to(h.dtype)
        agg = h + scatter_sum(h[src] * w[:, None], dst, h.shape[0])
        return self.lin(agg)


class SAGELayer(nn.Module):
    """GraphSAGE with the GCN aggregator: ``Linear((h_v + sum w h_u) / (1 + sum |w|))``."""

    def __init__(self, in_dim, out_dim, gen):
        super().__init__()
        self.lin = Linear(in_dim, out_dim, gen)

    def forward(self, h, dst, src, w):
        w = w.to(h.dtype)
        n = h.shape[0]
        num = h + scatter_sum(h[src] * w[:, None], dst, n)
        den = 1.0 + scatter_sum(w.abs(), dst, n)
        return self.lin(num / den[:, None])


class GATLayer(nn.Module):
    """Multi-head attention over sampled neighbors plus self; heads concatenated or averaged."""

    def __init__(self, in_dim, out_per_head, heads, concat, gen, negative_slope=0.2):
        super().__init__()
        self.heads, self.out, self.concat = heads, out_per_head, concat
        self.negative_slope = negative_slope
        self.weight = nn.Parameter(torch.empty(heads * out_per_head, in_dim))
        glorot_(self.weight, gen, in_dim, heads * out_per_head)
        self.att_dst = nn.Parameter(torch.empty(heads, out_per_head))
        self.att_src = nn.Parameter(torch.empty(heads, out_per_head))
        glorot_(self.att_dst, gen, out_per_head, 1)
        glorot_(self.att_src, gen, out_per_head, 1)
        self.bias = nn.Parameter(torch.zeros(heads * out_per_head if concat else out_per_head))

    def forward(self, h, dst, src, w):
        n = h.shape[0]
        z = (h @ self.weight.T).view(n, self.heads, self.out)
        loop = torch.arange(n)
        dst = torch.cat([dst, loop])
        src = torch.cat([src, loop])
        w = torch.cat([w.to(h.dtype), torch.ones(n, dtype=h.dtype)])
        a_dst = (z * self.att_dst).sum(-1)
        a_src = (z * self.att_src).sum(-1)
        e = F.leaky_relu(a_dst[dst] + a_src[src], self.negative_slope)
        e_max = torch.full((n, self.heads), -torch.inf, dtype=h.dtype)
        e_max = e_max.scatter_reduce(0, dst[:, None].expand(-1, self.heads), e, "amax")
        ex = torch.exp(e - e_max[dst].detach())
        denom = scatter_sum(ex, dst, n)
        alpha = ex / denom[dst]
        out = scatter_sum(z[src] * (alpha * w[:, None])[..., None], dst, n)
        out = out.reshape(n, -1) if self.concat else out.mean(dim=1)
        return out + self.bias


def dropout(x: torch.Tensor, p: float, training: bool, gen: torch.Generator | None) -> torch.Tensor:
    if not training or p == 0.0:
        return x
    mask = torch.rand(x.shape, generator=gen, dtype=x.dtype) >= p
    return x * mask / (1.0 - p)


class GNN(nn.Module):
    """Stack of message-passing layers.

    Targets end in a classification layer (a linear layer after the two SAGE
    layers); ``forward`` returns ``(embedding, output)`` where ``embedding`` is
    the penultimate representation. For surrogates both are the final layer.
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        gen = torch.Generator().manual_seed(int(seed))
        self.layers = nn.ModuleList()
        self.classifier = None
        hid, heads = cfg.hidden_dim, cfg.heads
        if cfg.role == "target":
            if cfg.arch == "SAGE":
                dims = [cfg.in_dim] + [hid] * (cfg.num_layers - 1) + [cfg.embedding_dim]
                self.classifier = Linear(cfg.embedding_dim, cfg.output_dim, gen)
            else:
                dims = [cfg.in_dim] + [hid] * (cfg.num_layers - 2) + [cfg.embedding_dim, cfg.output_dim]
        else:
            dims = [cfg.in_dim] + [hid] * (cfg.num_layers - 1) + [cfg.output_dim]
        for i in range(cfg.num_layers):
            last = i == cfg.num_layers - 1 and self.classifier is None
            self.layers.append(self._make_layer(dims[i], dims[i + 1], last, gen))

    def _make_layer(self, din, dout, last, gen):
        arch, heads = self.cfg.arch, self.cfg.heads
        if arch == "GIN":
            return GINLayer(din, dout, gen)
        if arch == "SAGE":
            return SAGELayer(din, dout, gen)
        if last:
            return GATLayer(din, dout, heads, concat=False, gen=gen)
        if dout % heads:
            raise ValidationError(f"GAT width {dout} not divisible by {heads} heads")
        return GATLayer(din, dout // heads, heads, concat=True, gen=gen)

    def forward(self, x, messages, gen: torch.Generator | None = None):
        h = x
        last = len(self.layers) - 1
        emb = None
        for i, (layer, (dst, src, w)) in enumerate(zip(self.layers, messages)):
            h = dropout(h, self.cfg.dropout, self.training, gen)
            h = layer(h, dst, src, w)
            if i < last or self.classifier is not None:
                h = F.relu(h)
            if i == last - 1 and self.classifier is None:
                emb = h
        if self.classifier is not None:
            emb = h
            h = self.classifier(dropout(h, self.cfg.dropout, self.training, gen))
        if self.cfg.role == "surrogate":
            emb = h
        return emb, h


# ---------------------------------------------------------------- handle


@dataclass
class ModelHandle:
    config: ModelConfig
    module: GNN
    training_log: list[dict] = field(default_factory=list)

    @classmethod
    def create(cls, config: ModelConfig, seed: int = 0) -> ModelHandle:
        return cls(config, GNN(config, seed))

    def _check(self, graph: Graph):
        if graph.d != self.config.in_dim:
            raise ShapeError(f"graph features have dim {graph.d}, model expects {self.config.in_dim}")

    def run(self, graph: Graph | Structure, X=None, seed: int | None = None, grad: bool = False):
        """Evaluation-mode forward over all nodes; returns torch ``(embedding, output)``."""
        if isinstance(graph, Graph):
            self._check(graph)
            X = graph.X if X is None else X
            graph = Structure.from_graph(graph)
        msgs = layer_messages(graph, self.config.fanouts, seed)
        dtype = next(self.module.parameters()).dtype
        x = torch.as_tensor(np.asarray(X), dtype=dtype)
        self.module.eval()
        with torch.set_grad_enabled(grad):
            return self.module(x, msgs)

    def forward(self, graph: Graph, nodes=None, seed: int | None = None) -> np.ndarray:
        """Per-node outputs: logits for targets, embeddings for surrogates.

        ``seed`` None uses full neighborhoods; otherwise neighbors are sampled per fanout.
        """
        _, out = self.run(graph, seed=seed)
        out = out.numpy()
        return out if nodes is None else out[np.asarray(nodes, dtype=np.int64)]

    def embed(self, graph: Graph, nodes=None, seed: int | None = None) -> np.ndarray:
        emb, _ = self.run(graph, seed=seed)
        emb = emb.numpy()
        return emb if nodes is None else emb[np.asarray(nodes, dtype=np.int64)]

    def save(self, path) -> Path:
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        (path / "config.json").write_text(json.dumps(self.config.to_dict(), indent=2) + "\n")
        state = self.module.state_dict()
        shapes = [{"name": k, "shape": list(v.shape)} for k, v in state.items()]
        blob = b"".join(v.detach().to(torch.float32).numpy().astype("<f4").tobytes() for v in state.values())
        (path / "weights.bin").write_bytes(blob)
        (path / "shapes.json").write_text(json.dumps(shapes, indent=2) + "\n")
        if self.training_log:
            (path / "training_log.json").write_text(json.dumps(self.training_log) + "\n")
        return path

    @classmethod
    def load(cls, path) -> ModelHandle:
        path = Path(path)
        cfg = ModelConfig(**json.loads((path / "config.json").read_text()))
        module = GNN(cfg)
        shapes = json.loads((path / "shapes.json").read_text())
        flat = np.frombuffer((path / "weights.bin").read_bytes(), dtype="<f4")
        state, off = {}, 0
        for entry in shapes:
            size = int(np.prod(entry["shape"])) if entry["shape"] else 1
            state[entry["name"]] = torch.from_numpy(flat[off : off + size].copy().reshape(entry["shape"]))
            off += size
        if off != flat.size:
            raise ShapeError("weights.bin size does not match shapes.json")
        module.load_state_dict(state)
        log_path = path / "training_log.json"
        log = json.loads(log_path.read_text()) if log_path.exists() else []
        return cls(cfg, module, log)
