"""Graph data model, bundle I/O, node splits, subgraphs and spectral primitives."""

from __future__ import annotations

import json
import logging
import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .errors import IngestionError, ValidationError

log = logging.getLogger(__name__)

BUNDLE_FILES = ("meta.json", "edges.tsv", "features.tsv", "labels.tsv")


@dataclass
class Graph:
    """Undirected node-attributed graph.

    ``edges`` holds each undirected edge once as a row ``(u, v)`` with ``u < v``,
    sorted lexicographically. ``weights`` is ``None`` for an unweighted graph.
    Subgraphs carry ``orig_ids`` (new index -> parent index) and ``center``.
    """

    n: int
    edges: np.ndarray
    X: np.ndarray
    C: np.ndarray
    name: str = "graph"
    num_classes: int | None = None
    weights: np.ndarray | None = None
    orig_ids: np.ndarray | None = None
    center: int | None = None
    _csr: sp.csr_matrix | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        self.X = np.asarray(self.X, dtype=np.float64)
        self.C = np.asarray(self.C, dtype=np.int64)
        if self.X.ndim == 1:
            self.X = self.X.reshape(self.n, -1)
        if self.weights is not None:
            self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.num_classes is None:
            self.num_classes = int(self.C.max()) + 1 if self.C.size else 0
        self.validate()

    @property
    def d(self) -> int:
        return int(self.X.shape[1])

    @property
    def num_edges(self) -> int:
        return int(self.edges.shape[0])

    def validate(self) -> None:
        if self.X.shape[0] != self.n:
            raise ValidationError(f"X has {self.X.shape[0]} rows, expected n={self.n}")
        if self.C.shape != (self.n,):
            raise ValidationError(f"C has shape {self.C.shape}, expected ({self.n},)")
        if self.edges.size:
            if self.edges.min() < 0 or self.edges.max() >= self.n:
                raise ValidationError("edge endpoint outside [0, n)")
            if np.any(self.edges[:, 0] >= self.edges[:, 1]):
                raise ValidationError("edges must be stored once with u < v (no self-loops)")
        if self.C.size and (self.C.min() < 0 or self.C.max() >= self.num_classes):
            raise ValidationError("labels outside [0, numClasses)")
        if self.weights is not None and self.weights.shape != (self.num_edges,):
            raise ValidationError("weights must have one entry per edge")

    def adjacency(self) -> sp.csr_matrix:
        """Symmetric sparse adjacency (cached)."""
        if self._csr is None:
            w = np.ones(self.num_edges) if self.weights is None else self.weights
            u, v = self.edges[:, 0], self.edges[:, 1]
            a = sp.coo_matrix(
                (np.concatenate([w, w]), (np.concatenate([u, v]), np.concatenate([v, u]))),
                shape=(self.n, self.n),
            )
            self._csr = a.tocsr()
            self._csr.sort_indices()
        return self._csr

    def dense_adjacency(self) -> np.ndarray:
        return self.adjacency().toarray()

    def neighbors(self, v: int) -> np.ndarray:
        a = self.adjacency()
        return a.indices[a.indptr[v] : a.indptr[v + 1]]

    def induced(self, nodes, name: str | None = None) -> Graph:
        """Induced subgraph on ``nodes`` (kept in the given order)."""
        nodes = np.asarray(nodes, dtype=np.int64)
        remap = np.full(self.n, -1, dtype=np.int64)
        remap[nodes] = np.arange(nodes.size)
        u, v = remap[self.edges[:, 0]], remap[self.edges[:, 1]]
        keep = (u >= 0) & (v >= 0)
        e = np.stack([u[keep], v[keep]], axis=1)
        w = None if self.weights is None else self.weights[keep]
        e, w = canonical_edges(e, w)
        parent = nodes if self.orig_ids is None else self.orig_ids[nodes]
        return Graph(
            n=int(nodes.size),
            edges=e,
            X=self.X[nodes],
            C=self.C[nodes],
            name=name or self.name,
            num_classes=self.num_classes,
            weights=w,
            orig_ids=parent,
        )

    def with_edges(self, edges, weights=None, name: str | None = None) -> Graph:
        e, w = canonical_edges(np.asarray(edges).reshape(-1, 2), weights)
        return Graph(
            n=self.n, edges=e, X=self.X, C=self.C, name=name or self.name,
            num_classes=self.num_classes, weights=w, orig_ids=self.orig_ids,
        )

    def same_as(self, other: Graph) -> bool:
        """Exact equality of structure, features, labels and metadata."""
        if (self.n, self.name, self.num_classes) != (other.n, other.name, other.num_classes):
            return False
        if (self.weights is None) != (other.weights is None):
            return False
        if self.weights is not None and not np.array_equal(self.weights, other.weights):
            return False
        return (
            np.array_equal(self.edges, other.edges)
            and np.array_equal(self.X, other.X)
            and np.array_equal(self.C, other.C)
        )


def canonical_edges(edges: np.ndarray, weights=None) -> tuple[np.ndarray, np.ndarray | None]:
    """Orient as ``u < v``, drop self-loops, deduplicate and sort.

    For duplicated weighted edges the first occurrence wins.
    """
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    lo = np.minimum(edges[:, 0], edges[:, 1])
    hi = np.maximum(edges[:, 0], edges[:, 1])
    keep = lo != hi
    lo, hi = lo[keep], hi[keep]
    w = None if weights is None else np.asarray(weights, dtype=np.float64)[keep]
    if lo.size == 0:
        return np.zeros((0, 2), dtype=np.int64), (None if w is None else np.zeros(0))
    pairs = np.stack([lo, hi], axis=1)
    uniq, first = np.unique(pairs, axis=0, return_index=True)
    return uniq, (None if w is None else w[first])


def from_dense(A: np.ndarray, X, C, name: str = "graph", num_classes=None, tol: float = 0.0) -> Graph:
    """Build a weighted graph from a symmetric dense matrix (upper triangle read)."""
    iu, ju = np.triu_indices(A.shape[0], k=1)
    vals = A[iu, ju]
    keep = np.abs(vals) > tol
    return Graph(
        n=A.shape[0], edges=np.stack([iu[keep], ju[keep]], axis=1), X=X, C=C,
        name=name, num_classes=num_classes, weights=vals[keep],
    )


# ---------------------------------------------------------------- bundle I/O


def save_graph_bundle(graph: Graph, path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    meta = {"name": graph.name, "n": graph.n, "d": graph.d, "numClasses": int(graph.num_classes)}
    (path / "meta.json").write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")
    with open(path / "edges.tsv", "w", encoding="utf-8", newline="\n") as fh:
        if graph.weights is None:
            for u, v in graph.edges:
                fh.write(f"{u}\t{v}\n")
        else:
            for (u, v), w in zip(graph.edges, graph.weights):
                fh.write(f"{u}\t{v}\t{float(w)!r}\n")
    with open(path / "features.tsv", "w", encoding="utf-8", newline="\n") as fh:
        for row in graph.X:
            fh.write("\t".join(repr(float(x)) for x in row) + "\n")
    with open(path / "labels.tsv", "w", encoding="utf-8", newline="\n") as fh:
        fh.writelines(f"{int(c)}\n" for c in graph.C)
    return path


def load_graph_bundle(path) -> Graph:
    """Read a bundle directory written by :func:`save_graph_bundle` (or by hand)."""
    path = Path(path)
    for fname in BUNDLE_FILES:
        if not (path / fname).is_file():
            raise IngestionError(f"bundle {path}: missing file {fname}")
    try:
        meta = json.loads((path / "meta.json").read_text(encoding="utf-8"))
        n, d, k = int(meta["n"]), int(meta["d"]), int(meta["numClasses"])
        name = str(meta.get("name", path.name))
    except (KeyError, ValueError, TypeError) as exc:
        raise IngestionError(f"bundle {path}: bad meta.json ({exc})") from exc

    edges, weights, weighted = [], [], None
    with open(path / "edges.tsv", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) not in (2, 3):
                raise ValidationError(f"edges.tsv line {lineno}: expected 2 or 3 columns")
            if weighted is None:
                weighted = len(parts) == 3
            elif weighted != (len(parts) == 3):
                raise ValidationError(f"edges.tsv line {lineno}: inconsistent column count")
            try:
                u, v = int(parts[0]), int(parts[1])
            except ValueError as exc:
                raise ValidationError(f"edges.tsv line {lineno}: {exc}") from exc
            if not (0 <= u < n and 0 <= v < n):
                raise ValidationError(f"edges.tsv line {lineno}: endpoint out of range [0, {n})")
            edges.append((u, v))
            if weighted:
                weights.append(float(parts[2]))

    rows = []
    with open(path / "features.tsv", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            vals = line.split("\t")
            if len(vals) != d:
                raise ValidationError(f"features.tsv line {lineno}: {len(vals)} columns, expected {d}")
            rows.append([float(x) for x in vals])
    if len(rows) != n:
        raise ValidationError(f"features.tsv: {len(rows)} rows, expected n={n}")

    labels = []
    with open(path / "labels.tsv", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            c = int(line)
            if not 0 <= c < k:
                raise ValidationError(f"labels.tsv line {lineno}: label {c} outside [0, {k})")
            labels.append(c)
    if len(labels) != n:
        raise ValidationError(f"labels.tsv: {len(labels)} labels, expected n={n}")

    e, w = canonical_edges(np.array(edges, dtype=np.int64).reshape(-1, 2), weights if weighted else None)
    X = np.array(rows, dtype=np.float64).reshape(n, d)
    return Graph(n=n, edges=e, X=X, C=np.array(labels), name=name, num_classes=k, weights=w)


# ---------------------------------------------------------------- splits


@dataclass(frozen=True)
class SplitSpec:
    target_train_frac: float = 0.2
    query_frac: float = 0.3
    test_frac: float = 0.5
    seed: int = 0

    def __post_init__(self):
        fr = (self.target_train_frac, self.query_frac, self.test_frac)
        if any(f <= 0 for f in fr) or abs(sum(fr) - 1.0) > 1e-9:
            raise ValidationError(f"split fractions must be positive and sum to 1, got {fr}")


@dataclass(frozen=True)
class NodeSplit:
    target_train: np.ndarray
    query: np.ndarray
    test: np.ndarray

    def sizes(self) -> tuple[int, int, int]:
        return len(self.target_train), len(self.query), len(self.test)


def split_nodes(graph: Graph, spec: SplitSpec = SplitSpec()) -> NodeSplit:
    """Seeded shuffle, then floor-sized target/query segments; the rest is test."""
    n = graph.n
    if n < 3:
        raise ValidationError(f"cannot split {n} nodes into three non-empty segments")
    perm = np.random.default_rng(spec.seed).permutation(n)
    a = math.floor(n * spec.target_train_frac)
    b = math.floor(n * spec.query_frac)
    if a == 0 or b == 0 or n - a - b == 0:
        raise ValidationError(f"split of n={n} leaves an empty segment")
    return NodeSplit(perm[:a], perm[a : a + b], perm[a + b :])


# ---------------------------------------------------------------- subgraphs


def bfs_distances(graph: Graph, source: int, max_depth: int | None = None) -> dict[int, int]:
    dist = {source: 0}
    queue = deque([source])
    while queue:
        u = queue.popleft()
        if max_depth is not None and dist[u] >= max_depth:
            continue
        for w in graph.neighbors(u):
            w = int(w)
            if w not in dist:
                dist[w] = dist[u] + 1
                queue.append(w)
    return dist


def k_hop_subgraph(graph: Graph, v: int, l: int) -> Graph:
    """Induced subgraph on nodes within ``l`` hops of ``v``; ``center`` is v's new index."""
    if not 0 <= v < graph.n:
        raise ValidationError(f"node {v} outside [0, {graph.n})")
    if l < 0:
        raise ValidationError("hop count must be non-negative")
    nodes = np.array(sorted(bfs_distances(graph, v, l)), dtype=np.int64)
    sub = graph.induced(nodes)
    sub.center = int(np.searchsorted(nodes, v))
    return sub


# ---------------------------------------------------------------- spectra


@dataclass(frozen=True)
class SpectralDecomposition:
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray

    @property
    def spectrum(self) -> np.ndarray:
        """Amplitude per frequency component: the eigenvalue magnitude at each sorted index."""
        return np.abs(self.eigenvalues)

    @property
    def n(self) -> int:
        return int(self.eigenvalues.size)


def normalized_laplacian_dense(A: np.ndarray) -> np.ndarray:
    """``I - D^-1/2 A D^-1/2`` with degrees from absolute row sums.

    Isolated nodes get an all-zero row and column.
    """
    A = np.asarray(A, dtype=np.float64)
    deg = np.abs(A).sum(axis=1)
    isolated = deg <= 0
    inv_sqrt = np.zeros_like(deg)
    inv_sqrt[~isolated] = 1.0 / np.sqrt(deg[~isolated])
    L = -(inv_sqrt[:, None] * A * inv_sqrt[None, :])
    L[np.diag_indices_from(L)] += np.where(isolated, 0.0, 1.0)
    return 0.5 * (L + L.T)


def normalized_laplacian(graph: Graph) -> np.ndarray:
    """Dense symmetric normalized Laplacian of ``graph`` (no self-loops added)."""
    return normalized_laplacian_dense(graph.dense_adjacency())


def eigendecompose(laplacian: np.ndarray, tol: float = 1e-8) -> SpectralDecomposition:
    """Exact dense symmetric eigendecomposition, eigenvalues ascending. O(n^3)."""
    L = np.asarray(laplacian, dtype=np.float64)
    if L.ndim != 2 or L.shape[0] != L.shape[1]:
        raise ValidationError(f"expected a square matrix, got shape {L.shape}")
    if L.size and np.max(np.abs(L - L.T)) > tol:
        raise ValidationError("matrix is not symmetric")
    w, U = np.linalg.eigh(L)
    return SpectralDecomposition(w, U)


# ---------------------------------------------------------------- synthetic data


def generate_sbm(
    blocks,
    p_in: float,
    p_out: float,
    d: int,
    seed: int = 0,
    feature_sep: float = 1.0,
    feature_noise: float = 1.0,
    name: str | None = None,
) -> Graph:
    """Stochastic block model with class-conditional Gaussian features.

    Block ``b`` gets mean ``feature_sep * mu_b`` where ``mu_b`` is a random unit
    vector; each node adds N(0, feature_noise^2) noise. Labels are block ids.
    """
    if not (0 <= p_in <= 1 and 0 <= p_out <= 1):
        raise ValidationError("edge probabilities must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    sizes = [int(b) for b in blocks]
    labels = np.repeat(np.arange(len(sizes)), sizes)
    n = labels.size
    iu, ju = np.triu_indices(n, k=1)
    prob = np.where(labels[iu] == labels[ju], p_in, p_out)
    hit = rng.random(iu.size) < prob
    edges = np.stack([iu[hit], ju[hit]], axis=1)
    means = rng.normal(size=(len(sizes), d))
    means /= np.linalg.norm(means, axis=1, keepdims=True)
    X = feature_sep * means[labels] + feature_noise * rng.normal(size=(n, d))
    return Graph(
        n=n, edges=edges, X=X, C=labels,
        name=name or f"sbm-{n}", num_classes=len(sizes),
    )
