"""Named datasets: raw-archive conversion and the synthetic desk-scale graphs."""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .errors import IngestionError
from .graph import Graph, generate_sbm, load_graph_bundle

CITESEER_ENV = "GNNSTEAL_CITESEER"
DEFAULT_DATA_DIR = Path("data")


def _csr(archive, prefix: str) -> sp.csr_matrix:
    try:
        return sp.csr_matrix(
            (archive[f"{prefix}_data"], archive[f"{prefix}_indices"], archive[f"{prefix}_indptr"]),
            shape=tuple(archive[f"{prefix}_shape"]),
        )
    except KeyError as exc:
        raise IngestionError(f"archive lacks key {exc}") from None


def graph_from_npz(path, name: str | None = None) -> Graph:
    """Read the compressed sparse archive layout used by the citation benchmarks.

    Expected keys: ``adj_{data,indices,indptr,shape}``, ``attr_{...}`` and
    ``labels``. Edges are symmetrized and unweighted; self-loops are dropped.
    """
    path = Path(path)
    if not path.is_file():
        raise IngestionError(f"raw dataset {path} not found")
    with np.load(path, allow_pickle=False) as archive:
        adj = _csr(archive, "adj")
        X = _csr(archive, "attr").toarray().astype(np.float64) if "attr_data" in archive else np.asarray(archive["attr_matrix"], dtype=np.float64)
        if "labels" not in archive:
            raise IngestionError("archive lacks key 'labels'")
        labels = np.asarray(archive["labels"], dtype=np.int64)
    adj = sp.triu(adj + adj.T, k=1).tocoo()
    edges = np.stack([adj.row, adj.col], axis=1).astype(np.int64)
    _, labels = np.unique(labels, return_inverse=True)
    return Graph(n=X.shape[0], edges=edges, X=X, C=labels, name=name or path.stem)


def desk_sbm(seed: int = 0) -> Graph:
    """1500-node, 5-class SBM used as the desk-scale stand-in for the citation graphs."""
    return generate_sbm((300,) * 5, 0.1, 0.01, d=32, seed=seed, feature_sep=1.5, name="sbm-1500")


def two_blob_sbm(seed: int = 0) -> Graph:
    """Two-block SBM whose block features are far apart."""
    return generate_sbm((150, 150), 0.1, 0.01, d=16, seed=seed, feature_sep=4.0, name="two-blob")


SYNTHETIC = {"sbm-1500": desk_sbm, "two-blob": two_blob_sbm}


def citeseer_location(data_dir=None) -> Path:
    env = os.environ.get(CITESEER_ENV)
    if env:
        return Path(env)
    return Path(data_dir or DEFAULT_DATA_DIR) / "citeseer_full"


def load_dataset(name: str, data_dir=None) -> Graph:
    """Resolve ``sbm-1500``, ``two-blob``, ``citeseer`` or a bundle directory path."""
    if name in SYNTHETIC:
        return SYNTHETIC[name](0)
    if name.lower() == "citeseer":
        loc = citeseer_location(data_dir)
        if not loc.exists():
            raise IngestionError(
                f"Citeseer bundle not found at {loc}; run `gnnsteal ingest` on citeseer.npz "
                f"or set {CITESEER_ENV}"
            )
        g = load_graph_bundle(loc)
        g.name = "citeseer"
        return g
    path = Path(name)
    if path.is_dir():
        return load_graph_bundle(path)
    raise IngestionError(f"unknown dataset {name!r}")
