"""Latent-space bias discovery: PCA + KMeans fitted on validation embeddings.

The predictor is fitted on validation-set embeddings (training embeddings
may be overfitted) and then used to pseudo-label the training set by
nearest centroid in the projected space.
"""

from __future__ import annotations

import json
import warnings as _warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import Dataset
from .errors import EvaluationError, ParameterError
from .model import ModelParams, embed

PCA_DIM_CAP = 32
KMEANS_RESTARTS = 10
KMEANS_TOL = 1e-6
KMEANS_MAX_ITER = 300
PREDICTOR_VERSION = 1


@dataclass(frozen=True)
class PcaModel:
    mean: np.ndarray
    components: np.ndarray  # (k_pca, N), orthonormal rows
    explained_fraction: float
    degenerate: bool = False

    @property
    def k_pca(self) -> int:
        return self.components.shape[0]

    def transform(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        return (x - self.mean) @ self.components.T


@dataclass(frozen=True)
class ClusterModel:
    centroids: np.ndarray  # (k, k_pca)
    k: int
    inertia: float

    def assign(self, p: np.ndarray) -> np.ndarray:
        p = np.atleast_2d(np.asarray(p, dtype=np.float64))
        d2 = ((p[:, None, :] - self.centroids[None, :, :]) ** 2).sum(axis=2)
        return d2.argmin(axis=1)


@dataclass(frozen=True)
class BiasPredictor:
    pca: PcaModel
    clusters: ClusterModel

    @property
    def k(self) -> int:
        return self.clusters.k


def fit_pca(x: np.ndarray, variance_target: float = 0.95) -> PcaModel:
    """Top covariance eigenvectors reaching variance_target, capped at
    min(N, 32).  Degenerate (zero-variance) input yields a single component
    and a warning flag.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ParameterError("need at least 2 rows to fit")
    if not 0.0 < variance_target <= 1.0:
        raise ParameterError(f"variance_target must be in (0, 1], got {variance_target}")
    mean = x.mean(axis=0)
    centered = x - mean
    cov = centered.T @ centered / (x.shape[0] - 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1]
    eigvals = np.maximum(eigvals[order], 0.0)
    eigvecs = eigvecs[:, order]
    total = eigvals.sum()
    if total <= 1e-30:
        _warnings.warn("zero-variance input; PCA degenerates to one component")
        return PcaModel(
            mean=mean,
            components=eigvecs[:, :1].T.copy(),
            explained_fraction=0.0,
            degenerate=True,
        )
    cumulative = np.cumsum(eigvals) / total
    k = int(np.searchsorted(cumulative, variance_target - 1e-12) + 1)
    k = min(k, x.shape[1], PCA_DIM_CAP)
    components = eigvecs[:, :k].T.copy()
    # Deterministic sign: largest-magnitude entry of each component positive.
    for row in components:
        if row[np.abs(row).argmax()] < 0:
            row *= -1
    return PcaModel(
        mean=mean,
        components=components,
        explained_fraction=float(cumulative[k - 1]),
    )


def _plus_plus_seed(
    p: np.ndarray, k: int, rng: np.random.Generator
) -> np.ndarray:
    """k-means++ initialization."""
    n = p.shape[0]
    centroids = np.empty((k, p.shape[1]))
    centroids[0] = p[rng.integers(n)]
    d2 = ((p - centroids[0]) ** 2).sum(axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            centroids[i] = p[rng.integers(n)]
            continue
        centroids[i] = p[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, ((p - centroids[i]) ** 2).sum(axis=1))
    return centroids


def _lloyd(p: np.ndarray, centroids: np.ndarray):
    """Lloyd iterations until centroid shift < tol; WCSS must not increase."""
    k = centroids.shape[0]
    prev_wcss = np.inf
    for _ in range(KMEANS_MAX_ITER):
        d2 = ((p[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        labels = d2.argmin(axis=1)
        wcss = float(d2[np.arange(p.shape[0]), labels].sum())
        if wcss > prev_wcss + 1e-9:
            raise AssertionError("WCSS increased across Lloyd iterations")
        prev_wcss = wcss
        new_centroids = centroids.copy()
        for c in range(k):
            members = labels == c
            if members.any():
                new_centroids[c] = p[members].mean(axis=0)
            else:
                # Re-seed an empty cluster at the worst-fit point.
                new_centroids[c] = p[d2[np.arange(p.shape[0]), labels].argmax()]
        shift = np.sqrt(((new_centroids - centroids) ** 2).sum(axis=1)).max()
        centroids = new_centroids
        if shift < KMEANS_TOL:
            break
    d2 = ((p[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    labels = d2.argmin(axis=1)
    wcss = float(d2[np.arange(p.shape[0]), labels].sum())
    return centroids, labels, wcss


def kmeans_fit(p: np.ndarray, k: int, seed: int) -> ClusterModel:
    """Best of 10 k-means++ restarts by WCSS."""
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 2:
        raise ParameterError("points must be 2-D")
    if k < 1:
        raise ParameterError(f"k must be >= 1, got {k}")
    if p.shape[0] < k:
        raise ParameterError(f"need at least k={k} points, got {p.shape[0]}")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(KMEANS_RESTARTS):
        centroids, _, wcss = _lloyd(p, _plus_plus_seed(p, k, rng))
        if best is None or wcss < best[1]:
            best = (centroids, wcss)
    return ClusterModel(centroids=best[0], k=k, inertia=best[1])


def _silhouette_from_distances(dist: np.ndarray, assignments: np.ndarray) -> float:
    labels = np.unique(assignments)
    if labels.size < 2:
        raise EvaluationError("silhouette undefined for a single cluster")
    n = dist.shape[0]
    scores = np.zeros(n)
    members = {c: np.flatnonzero(assignments == c) for c in labels}
    for i in range(n):
        own = members[assignments[i]]
        if own.size == 1:
            continue  # singleton convention: score 0
        a = dist[i, own].sum() / (own.size - 1)
        b = min(dist[i, members[c]].mean() for c in labels if c != assignments[i])
        denom = max(a, b)
        scores[i] = (b - a) / denom if denom > 0 else 0.0
    return float(scores.mean())


def silhouette(p: np.ndarray, assignments: np.ndarray) -> float:
    """Mean silhouette score; singleton clusters score 0 per convention."""
    p = np.asarray(p, dtype=np.float64)
    assignments = np.asarray(assignments)
    if assignments.shape != (p.shape[0],):
        raise ParameterError("assignments length must match points")
    dist = np.sqrt(
        np.maximum(
            ((p[:, None, :] - p[None, :, :]) ** 2).sum(axis=2),
            0.0,
        )
    )
    return _silhouette_from_distances(dist, assignments)


def select_k(
    p: np.ndarray, k_min: int = 2, k_max: int = 15, seed: int = 0
) -> tuple[int, ClusterModel]:
    """Grid search over cluster counts; keep the best silhouette, ties to
    the smaller k.
    """
    p = np.asarray(p, dtype=np.float64)
    n = p.shape[0]
    if n <= k_max:
        _warnings.warn(f"only {n} points; shrinking k range to [2, {n - 1}]")
        k_max = n - 1
    if k_max < k_min:
        raise ParameterError(f"empty k range [{k_min}, {k_max}]")
    dist = np.sqrt(
        np.maximum(((p[:, None, :] - p[None, :, :]) ** 2).sum(axis=2), 0.0)
    )
    best_k, best_model, best_score = None, None, -np.inf
    for k in range(k_min, k_max + 1):
        model = kmeans_fit(p, k, seed)
        score = _silhouette_from_distances(dist, model.assign(p))
        if score > best_score:
            best_k, best_model, best_score = k, model, score
    return best_k, best_model


def predict_bias(predictor: BiasPredictor, z: np.ndarray):
    """Nearest-centroid pseudo-label after PCA projection; ties break to the
    lowest centroid index.  Accepts a single embedding or a batch.
    """
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    labels = predictor.clusters.assign(predictor.pca.transform(z))
    return int(labels[0]) if single else labels


def pseudo_label_dataset(
    predictor: BiasPredictor, encoder: ModelParams, train: Dataset
) -> Dataset:
    """Replace the training set's bias column with predicted pseudo-labels.

    The returned dataset carries no ground-truth bias labels; callers keep
    the original dataset when they need them for evaluation.
    """
    z = embed(encoder, train.features)
    labels = predict_bias(predictor, z)
    return train.with_biases(labels, n_biases=predictor.k)


def save_predictor(path: str | Path, predictor: BiasPredictor) -> None:
    meta = {
        "version": PREDICTOR_VERSION,
        "k": predictor.clusters.k,
        "inertia": predictor.clusters.inertia,
        "explained_fraction": predictor.pca.explained_fraction,
        "degenerate": predictor.pca.degenerate,
    }
    np.savez(
        path,
        meta=json.dumps(meta, sort_keys=True),
        pca_mean=predictor.pca.mean,
        pca_components=predictor.pca.components,
        centroids=predictor.clusters.centroids,
    )


def load_predictor(path: str | Path) -> BiasPredictor:
    with np.load(path, allow_pickle=False) as blob:
        meta = json.loads(str(blob["meta"]))
        if meta["version"] != PREDICTOR_VERSION:
            raise ParameterError(f"unsupported predictor version {meta['version']}")
        pca = PcaModel(
            mean=blob["pca_mean"].copy(),
            components=blob["pca_components"].copy(),
            explained_fraction=meta["explained_fraction"],
            degenerate=meta["degenerate"],
        )
        clusters = ClusterModel(
            centroids=blob["centroids"].copy(),
            k=meta["k"],
            inertia=meta["inertia"],
        )
    return BiasPredictor(pca=pca, clusters=clusters)


def save_pseudo_labels(path: str | Path, labels: np.ndarray) -> None:
    """CSV dump: sample index, pseudo-label."""
    with open(path, "w") as fh:
        fh.write("index,pseudo_label\n")
        for i, label in enumerate(np.asarray(labels)):
            fh.write(f"{i},{int(label)}\n")
