"""Augmented graph views: a spectral adjacency transform plus classical feature/edge noise.

The spectral transform perturbs ``A`` into ``A' = A + Delta`` so that the
normalized-Laplacian spectra of the two views differ more in the high band
(upper half of the sorted eigen-indices) than in the low band. Quality of a
pair is the margin ``min_high |phi - phi'| - max_low |phi - phi'|``, where
``phi`` is the eigenvalue magnitude at a sorted index.

Roles of the four optimizer constants:

* ``eta``: gradient step size (backtracked by halving when a step does not help)
* ``omega``: Frobenius radius that ``Delta`` is projected onto after each step
* ``iterations``: number of outer rounds
* ``epsilon``: once the margin is positive, stop when a round improves it by less than this
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from .errors import SpectralAugmentError, ValidationError
from .gnn import Structure
from .graph import Graph, SpectralDecomposition, eigendecompose, normalized_laplacian_dense

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AugmentConfig:
    p1: float = 0.5
    p2: float = 0.1
    epsilon: float = 0.01
    eta: float = 1.0
    omega: float = 20.0
    iterations: int = 3
    seed: int = 0
    # std of the symmetric noise added to the initial perturbation (breaks spectral ties)
    init_noise: float = 0.01
    max_halvings: int = 6

    def __post_init__(self):
        for name in ("p1", "p2"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValidationError(f"{name} must lie in [0, 1], got {v}")
        for name in ("epsilon", "eta", "omega", "iterations"):
            if getattr(self, name) <= 0:
                raise ValidationError(f"{name} must be positive")
        if self.init_noise < 0 or self.max_halvings < 0:
            raise ValidationError("init_noise and max_halvings must be non-negative")

    def with_seed(self, seed: int) -> AugmentConfig:
        return replace(self, seed=int(seed))


@dataclass
class AugmentedView:
    Aprime: np.ndarray
    Xprime: np.ndarray
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        A = self.Aprime
        if A.ndim != 2 or A.shape[0] != A.shape[1] or A.shape[0] != self.Xprime.shape[0]:
            raise ValidationError("Aprime must be square and match Xprime rows")
        if np.any(np.abs(A) > 1.0) or not np.array_equal(A, A.T):
            raise ValidationError("Aprime must be symmetric with entries in [-1, 1]")

    @classmethod
    def identity(cls, graph: Graph) -> AugmentedView:
        return cls(graph.dense_adjacency(), np.array(graph.X, dtype=np.float64), {"transforms": []})

    def structure(self) -> Structure:
        return Structure.from_dense(self.Aprime)


def band_amplitudes(decomp: SpectralDecomposition) -> tuple[np.ndarray, np.ndarray]:
    lam = decomp.eigenvalues
    if lam.size > 1 and np.any(np.diff(lam) < 0):
        raise ValidationError("eigenvalues must be sorted ascending")
    amp = decomp.spectrum
    h = amp.size // 2
    return amp[:h], amp[h:]


@dataclass(frozen=True)
class PairCheck:
    optimal: bool
    margin: float
    min_high_diff: float
    max_low_diff: float

    def __bool__(self) -> bool:
        return self.optimal


def _margin(amp_a: np.ndarray, amp_b: np.ndarray) -> tuple[float, float, float]:
    diff = np.abs(amp_a - amp_b)
    h = diff.size // 2
    hi = float(diff[h:].min())
    lo = float(diff[:h].max()) if h else 0.0
    return hi - lo, hi, lo


def _amplitudes(A: np.ndarray) -> np.ndarray:
    return np.abs(np.linalg.eigvalsh(normalized_laplacian_dense(A)))


def is_optimal_pair(A, Aprime) -> PairCheck:
    """Compare the band-wise spectral differences of two symmetric matrices."""
    A = np.asarray(A, dtype=np.float64)
    Aprime = np.asarray(Aprime, dtype=np.float64)
    if A.shape != Aprime.shape or A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValidationError(f"shape mismatch: {A.shape} vs {Aprime.shape}")
    if A.shape[0] < 2:
        raise ValidationError("need at least two nodes")
    amp_a = eigendecompose(normalized_laplacian_dense(A)).spectrum
    amp_b = eigendecompose(normalized_laplacian_dense(Aprime)).spectrum
    margin, hi, lo = _margin(amp_a, amp_b)
    return PairCheck(margin > 0, margin, hi, lo)


def _laplacian_t(A: torch.Tensor) -> torch.Tensor:
    deg = A.abs().sum(1)
    present = deg > 0
    inv = torch.where(present, deg.clamp_min(1e-300).rsqrt(), torch.zeros_like(deg))
    L = torch.diag(present.to(A.dtype)) - inv[:, None] * A * inv[None, :]
    return 0.5 * (L + L.T)


def _margin_gradient(A: np.ndarray, Delta: np.ndarray, amp0: torch.Tensor) -> np.ndarray:
    # smooth surrogate of the margin: soft-min over the high band minus soft-max over the low band
    h = A.shape[0] // 2
    D = torch.tensor(Delta, requires_grad=True)
    lam = torch.linalg.eigvalsh(_laplacian_t(torch.from_numpy(A) + D))
    diff = torch.sqrt((lam.abs() - amp0) ** 2 + 1e-12)
    beta = 1.0 / max(float(diff.detach().std()), 1e-6)
    obj = -torch.logsumexp(-beta * diff[h:], 0) / beta - torch.logsumexp(beta * diff[:h], 0) / beta
    obj.backward()
    return D.grad.numpy()


def _project(A: np.ndarray, Delta: np.ndarray, omega: float) -> np.ndarray:
    Delta = np.clip(A + Delta, -1.0, 1.0) - A
    norm = np.linalg.norm(Delta)
    return Delta * (omega / norm) if norm > omega else Delta


def spectral_perturbation(A: np.ndarray, cfg: AugmentConfig) -> tuple[np.ndarray, dict]:
    """Optimize ``Delta`` for the dense adjacency ``A``; returns the best iterate and a trace.

    ``Delta`` lives on the edges of ``A`` plus the diagonal of non-isolated
    nodes, so ``A'`` stays as sparse as ``A``. The start point adds self-loops
    proportional to degree, which shrinks every eigenvalue by a common factor
    and so moves high frequencies further than low ones.
    """
    A = np.asarray(A, dtype=np.float64)
    deg = np.abs(A).sum(axis=1)
    support = (A != 0) | np.diag(deg > 0)
    rng = np.random.default_rng(cfg.seed)
    noise = rng.normal(0.0, cfg.init_noise, size=A.shape)
    Delta = np.diag(np.minimum(deg / max(deg.max(), 1.0), 1.0)) + 0.5 * (noise + noise.T) * support
    Delta = _project(A, Delta, cfg.omega)

    amp0 = _amplitudes(A)
    amp0_t = torch.from_numpy(amp0)
    margin = _margin(amp0, _amplitudes(A + Delta))[0]
    trace = {"margins": [margin], "frobenius": [float(np.linalg.norm(Delta))], "steps": []}
    best, best_margin = Delta, margin
    for _ in range(cfg.iterations):
        G = _margin_gradient(A, Delta, amp0_t)
        G = 0.5 * (G + G.T) * support
        step, accepted = cfg.eta, None
        for _ in range(cfg.max_halvings + 1):
            cand = _project(A, Delta + step * G, cfg.omega)
            m = _margin(amp0, _amplitudes(A + cand))[0]
            if m > margin:
                accepted = (cand, m)
                break
            step /= 2
        if accepted is None:
            break
        prev = margin
        Delta, margin = accepted
        trace["margins"].append(margin)
        trace["frobenius"].append(float(np.linalg.norm(Delta)))
        trace["steps"].append(step)
        if margin > best_margin:
            best, best_margin = Delta, margin
        if margin > 0 and margin - prev < cfg.epsilon:
            break
    trace["margin"] = best_margin
    return best, trace


def spectral_augment(graph: Graph, cfg: AugmentConfig | None = None) -> AugmentedView:
    cfg = cfg or AugmentConfig()
    if graph.n < 2 or graph.num_edges == 0:
        raise ValidationError("spectral augmentation needs n >= 2 and at least one edge")
    A = graph.dense_adjacency()
    Delta, trace = spectral_perturbation(A, cfg)
    if trace["margin"] <= 0:
        raise SpectralAugmentError(trace["margin"])
    Aprime = np.clip(A + Delta, -1.0, 1.0)
    Aprime = 0.5 * (Aprime + Aprime.T)
    prov = {"transforms": ["spectral"], "spectral": {"seed": cfg.seed, **trace}}
    return AugmentedView(Aprime, np.array(graph.X, dtype=np.float64), prov)


def _random_zero_pairs(A: np.ndarray, count: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    zero_u, zero_v = np.nonzero(np.triu(A == 0, k=1))
    count = min(count, zero_u.size)
    pick = np.sort(rng.choice(zero_u.size, size=count, replace=False)) if count else np.zeros(0, np.int64)
    return zero_u[pick], zero_v[pick]


def classical_augment(view: AugmentedView, X=None, cfg: AugmentConfig | None = None) -> AugmentedView:
    """Entry-wise feature masking, edge dropping and matched edge insertion.

    Every off-diagonal nonzero pair is dropped with probability ``p2``; the same
    number of currently-zero pairs then receive symmetric weights from U[-0.1, 0.1].
    """
    cfg = cfg or AugmentConfig()
    rng = np.random.default_rng(cfg.seed)
    X = np.array(view.Xprime if X is None else X, dtype=np.float64)
    keep = rng.random(X.shape) >= cfg.p1
    Xp = X * keep

    A = view.Aprime.copy()
    iu, ju = np.nonzero(np.triu(A != 0, k=1))
    drop = rng.random(iu.size) < cfg.p2
    du, dv = iu[drop], ju[drop]
    pu, pv = _random_zero_pairs(view.Aprime, int(drop.sum()), rng)
    A[du, dv] = A[dv, du] = 0.0
    vals = rng.uniform(-0.1, 0.1, size=pu.size)
    A[pu, pv] = A[pv, pu] = vals

    prov = dict(view.provenance)
    prov["transforms"] = list(prov.get("transforms", [])) + ["feature_mask", "edge_drop", "edge_perturb"]
    prov["classical"] = {"seed": cfg.seed, "masked": int((~keep).sum()), "dropped": int(du.size),
                         "added": int(pu.size)}
    return AugmentedView(A, Xp, prov)


def augmented_view(graph: Graph, cfg: AugmentConfig, spectral: AugmentedView | None = None,
                   use_spectral: bool = True) -> AugmentedView:
    """Spectral view (computed unless supplied) followed by classical noise.

    A spectral failure is logged and the view falls back to classical noise alone.
    """
    base = spectral
    if base is None and use_spectral:
        try:
            base = spectral_augment(graph, cfg)
        except SpectralAugmentError as exc:
            log.warning("spectral augmentation failed (best margin %.3g); using classical only", exc.best_margin)
    if base is None:
        base = AugmentedView.identity(graph)
    return classical_augment(base, graph.X, cfg)
