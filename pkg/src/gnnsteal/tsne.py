"""Exact t-SNE (no Barnes-Hut), used by the oracle for 2-D projection responses."""

from __future__ import annotations

import numpy as np
from scipy.spatial.distance import cdist

from .errors import ValidationError


def squared_distances(X: np.ndarray) -> np.ndarray:
    # per-pair evaluation: identical rows give bitwise-identical distance rows
    return cdist(X, X, "sqeuclidean")


def conditional_affinities(D: np.ndarray, perplexity: float, tol: float = 1e-5, max_steps: int = 100) -> np.ndarray:
    """Row-wise Gaussian affinities whose entropy matches ``log(perplexity)``.

    The precision ``beta = 1 / (2 sigma^2)`` of each row is found by bisection.
    """
    m = D.shape[0]
    target = np.log(perplexity)
    P = np.zeros((m, m))
    for i in range(m):
        d = np.delete(D[i], i)
        d = d - d.min()
        lo, hi, beta = 0.0, np.inf, 1.0
        for _ in range(max_steps):
            p = np.exp(-d * beta)
            s = p.sum()
            H = np.log(s) + beta * np.sum(d * p) / s
            if abs(H - target) < tol:
                break
            if H > target:
                lo = beta
                beta = beta * 2 if hi == np.inf else (beta + hi) / 2
            else:
                hi = beta
                beta = (beta + lo) / 2
        P[i, np.arange(m) != i] = p / s
    return P


def pca(X: np.ndarray, dims: int) -> np.ndarray:
    Xc = X - X.mean(axis=0)
    U, S, _ = np.linalg.svd(Xc, full_matrices=False)
    return U[:, :dims] * S[:dims]


def kl_divergence(P: np.ndarray, Y: np.ndarray) -> float:
    num = 1.0 / (1.0 + squared_distances(Y))
    np.fill_diagonal(num, 0.0)
    Q = np.maximum(num / num.sum(), 1e-12)
    mask = P > 0
    return float(np.sum(P[mask] * np.log(P[mask] / Q[mask])))


def tsne_project(
    embeddings,
    perplexity: float = 30.0,
    iterations: int = 500,
    seed: int = 0,
    learning_rate: float = 200.0,
    init: np.ndarray | None = None,
    early_exaggeration: float = 12.0,
    exaggeration_iters: int = 100,
    pca_dims: int = 50,
    pca_min_dim: int = 64,
    history: list | None = None,
) -> np.ndarray:
    """2-D exact t-SNE of ``embeddings`` (m x b), centered at the origin.

    Gradient descent with momentum 0.5 (first 250 steps) then 0.8, plus
    per-coordinate adaptive gains. Inputs of width >= ``pca_min_dim`` are first
    reduced to ``pca_dims`` principal components. If ``history`` is given, the
    KL divergence after every step is appended to it.
    """
    X = np.asarray(embeddings, dtype=np.float64)
    m = X.shape[0]
    if m <= 3 * perplexity:
        raise ValidationError(f"t-SNE needs more than {3 * perplexity:g} points, got {m}")
    if X.shape[1] >= pca_min_dim and X.shape[1] > pca_dims:
        X = pca(X, pca_dims)

    P = conditional_affinities(squared_distances(X), perplexity)
    P = (P + P.T) / (2.0 * m)
    P = np.maximum(P, 1e-12)
    np.fill_diagonal(P, 0.0)

    rng = np.random.default_rng(seed)
    Y = np.array(init, dtype=np.float64) if init is not None else rng.normal(0.0, 1e-4, size=(m, 2))
    velocity = np.zeros_like(Y)
    gains = np.ones_like(Y)
    for it in range(iterations):
        exag = early_exaggeration if it < exaggeration_iters else 1.0
        momentum = 0.5 if it < 250 else 0.8
        diff = Y[:, None, :] - Y[None, :, :]
        num = 1.0 / (1.0 + np.sum(diff * diff, axis=-1))
        np.fill_diagonal(num, 0.0)
        Q = np.maximum(num / num.sum(), 1e-12)
        W = (exag * P - Q) * num
        grad = 4.0 * np.sum(W[:, :, None] * diff, axis=1)
        same_sign = np.sign(grad) == np.sign(velocity)
        gains = np.where(same_sign, gains * 0.8, gains + 0.2)
        np.maximum(gains, 0.01, out=gains)
        velocity = momentum * velocity - learning_rate * gains * grad
        Y = Y + velocity
        Y -= Y.mean(axis=0)
        if history is not None:
            history.append(kl_divergence(P, Y))
    return Y
