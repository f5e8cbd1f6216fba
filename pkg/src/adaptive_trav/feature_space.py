"""Compressed feature space: K-means cluster fitting and L1 distance descriptors.

Per-pixel embeddings of dimension ``C`` are summarised by a ``k``-vector
whose ``j``-th entry is the L1 distance to cluster center ``j``.  The same
descriptor doubles as an out-of-distribution score (distance to the nearest
center) and as a coarse semantic label (index of the nearest center).

Cluster file format (plain text)::

    k C tau
    c_11 c_12 ... c_1C
    ...
    c_k1 c_k2 ... c_kC

Values are written with ``repr`` so a save/load cycle is bit-exact.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidInputError

DEFAULT_K = 32
DEFAULT_TAU_PERCENTILE = 95.0


@dataclass(frozen=True)
class ClusterSet:
    """Immutable set of cluster centers plus the OOD distance threshold.

    Attributes
    ----------
    centers : np.ndarray
        ``(k, C)`` array of centers. Stored read-only.
    tau : float
        OOD threshold in L1 distance units.
    """

    centers: np.ndarray
    tau: float

    def __post_init__(self):
        centers = np.array(self.centers, dtype=np.float64)
        if centers.ndim != 2:
            raise InvalidInputError("centers must be a (k, C) array")
        if centers.shape[0] < 2:
            raise InvalidInputError("need at least two cluster centers")
        if not np.all(np.isfinite(centers)):
            raise InvalidInputError("centers must be finite")
        if len(np.unique(centers, axis=0)) != centers.shape[0]:
            raise InvalidInputError("cluster centers must be distinct")
        if not (np.isfinite(self.tau) and self.tau > 0):
            raise InvalidInputError("tau must be a positive finite number")
        centers.setflags(write=False)
        object.__setattr__(self, "centers", centers)
        object.__setattr__(self, "tau", float(self.tau))

    @property
    def k(self) -> int:
        return self.centers.shape[0]

    @property
    def dim(self) -> int:
        return self.centers.shape[1]

    def with_tau(self, tau: float) -> "ClusterSet":
        return ClusterSet(self.centers, tau)


@dataclass
class KMeansResult:
    centers: np.ndarray
    labels: np.ndarray
    n_iter: int
    objective_history: list = field(default_factory=list)


def _as_samples(samples) -> np.ndarray:
    try:
        x = np.asarray(samples, dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise InvalidInputError("embeddings must share one dimension") from exc
    if x.ndim != 2:
        raise InvalidInputError("embeddings must be a list of equal-length vectors")
    if not np.all(np.isfinite(x)):
        raise InvalidInputError("embeddings contain non-finite values")
    return x


def _sq_dists(x: np.ndarray, centers: np.ndarray) -> np.ndarray:
    diff = x[:, None, :] - centers[None, :, :]
    return np.einsum("nkc,nkc->nk", diff, diff)


def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    idx = [int(rng.integers(n))]
    d2 = ((x - x[idx[0]]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            raise InvalidInputError("fewer distinct embeddings than clusters")
        nxt = int(rng.choice(n, p=d2 / total))
        idx.append(nxt)
        d2 = np.minimum(d2, ((x - x[nxt]) ** 2).sum(axis=1))
    return x[idx].copy()


def kmeans(samples, k: int, seed: int, tol: float = 1e-6, max_iter: int = 100) -> KMeansResult:
    """Lloyd's algorithm with k-means++ seeding.

    Iteration stops once no center moves by more than ``tol`` (Euclidean)
    or after ``max_iter`` update steps.  Empty clusters keep their previous
    center, which keeps the objective sequence non-increasing.
    """
    x = _as_samples(samples)
    if k < 2:
        raise InvalidInputError("k must be at least 2")
    if x.shape[0] < k:
        raise InvalidInputError(f"need at least k={k} samples, got {x.shape[0]}")
    rng = np.random.default_rng(seed)
    centers = _kmeans_pp(x, k, rng)
    history = []
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        d2 = _sq_dists(x, centers)
        labels = d2.argmin(axis=1)
        history.append(float(d2[np.arange(len(x)), labels].sum()))
        new = centers.copy()
        counts = np.bincount(labels, minlength=k)
        sums = np.zeros_like(centers)
        np.add.at(sums, labels, x)
        nz = counts > 0
        new[nz] = sums[nz] / counts[nz, None]
        shift = np.sqrt(((new - centers) ** 2).sum(axis=1)).max()
        centers = new
        if shift < tol:
            break
    d2 = _sq_dists(x, centers)
    labels = d2.argmin(axis=1)
    history.append(float(d2[np.arange(len(x)), labels].sum()))
    return KMeansResult(centers=centers, labels=labels, n_iter=n_iter, objective_history=history)


def fit_clusters(samples, k: int = DEFAULT_K, seed: int = 0,
                 tau_percentile: float = DEFAULT_TAU_PERCENTILE) -> ClusterSet:
    """Fit ``k`` centers and derive the OOD threshold from the same samples.

    ``tau`` is the ``tau_percentile`` percentile of each sample's L1 distance
    to its nearest center.
    """
    x = _as_samples(samples)
    result = kmeans(x, k, seed)
    min_l1 = np.abs(x[:, None, :] - result.centers[None]).sum(axis=2).min(axis=1)
    tau = float(np.percentile(min_l1, tau_percentile))
    if tau <= 0:
        # every sample sits on a center; any positive threshold is consistent
        tau = float(np.finfo(float).eps)
    return ClusterSet(result.centers, tau)


def subsample(embeddings, n: int, seed: int) -> np.ndarray:
    """Uniformly draw ``n`` rows without replacement (all rows if fewer)."""
    x = _as_samples(embeddings)
    if n >= len(x):
        return x.copy()
    rng = np.random.default_rng(seed)
    return x[np.sort(rng.choice(len(x), size=n, replace=False))]


def vlad_descriptor(d, clusters: ClusterSet) -> np.ndarray:
    """L1 distance from embedding(s) ``d`` to every center.

    Accepts a single ``(C,)`` embedding or a ``(n, C)`` batch.
    """
    d = np.asarray(d, dtype=np.float64)
    if d.shape[-1] != clusters.dim:
        raise InvalidInputError(
            f"embedding dimension {d.shape[-1]} does not match clusters ({clusters.dim})")
    return np.abs(d[..., None, :] - clusters.centers).sum(axis=-1)


def nearest_class(desc) -> int | np.ndarray:
    """Index of the smallest descriptor entry (first index on ties)."""
    desc = np.asarray(desc)
    if desc.shape[-1] == 0:
        raise InvalidInputError("empty descriptor")
    out = np.argmin(desc, axis=-1)
    return int(out) if out.ndim == 0 else out


def ood_score(desc):
    desc = np.asarray(desc, dtype=np.float64)
    if desc.shape[-1] == 0:
        raise InvalidInputError("empty descriptor")
    out = desc.min(axis=-1)
    return float(out) if out.ndim == 0 else out


def is_ood(desc, clusters: ClusterSet):
    out = np.asarray(ood_score(desc)) > clusters.tau
    return bool(out) if out.ndim == 0 else out


def save_clusters(clusters: ClusterSet, path) -> None:
    lines = [f"{clusters.k} {clusters.dim} {clusters.tau!r}"]
    for row in clusters.centers:
        lines.append(" ".join(repr(float(v)) for v in row))
    Path(path).write_text("\n".join(lines) + "\n")


def load_clusters(path) -> ClusterSet:
    text = Path(path).read_text().split("\n")
    rows = [ln for ln in text if ln.strip()]
    if not rows:
        raise InvalidInputError(f"{path}: empty cluster file")
    head = rows[0].split()
    if len(head) != 3:
        raise InvalidInputError(f"{path}: header must be 'k C tau'")
    k, dim, tau = int(head[0]), int(head[1]), float(head[2])
    body = rows[1:]
    if len(body) != k:
        raise InvalidInputError(f"{path}: expected {k} center rows, found {len(body)}")
    centers = np.array([[float(v) for v in ln.split()] for ln in body])
    if centers.shape != (k, dim):
        raise InvalidInputError(f"{path}: center rows must have {dim} values")
    return ClusterSet(centers, tau)


def load_embeddings(path) -> np.ndarray:
    """Read embeddings from ``.npy`` or whitespace-separated text (one per row)."""
    path = Path(path)
    if path.suffix == ".npy":
        x = np.load(path)
    else:
        x = np.loadtxt(path, ndmin=2)
    return _as_samples(x)
