"""Unsupervised downstream classifier: k-means plus optimal label matching.

Presence vectors are clustered with Lloyd's algorithm (k-means++ seeding,
deterministic for a given seed), then cluster indices are mapped onto
ground-truth labels by solving the assignment problem that maximizes
agreement.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

_MAX_LLOYD_ITERS = 300

_MAGIC = b"CCLS"
_VERSION = 1
_MODE_CODES = {"prior": 0, "posterior": 1}
_MODE_NAMES = {code: name for name, code in _MODE_CODES.items()}


class ClassifierFormatError(Exception):
    """Raised when a serialized classifier file is malformed."""


@dataclass(frozen=True)
class KMeansModel:
    centroids: np.ndarray  # (k, dim)
    k: int
    seed: int
    wcss_path: tuple[float, ...] = ()  # within-cluster sum of squares per iteration


@dataclass(frozen=True)
class LabelPermutation:
    """Bijective cluster-index -> class-label mapping."""

    mapping: tuple[int, ...]

    def __post_init__(self):
        if sorted(self.mapping) != list(range(len(self.mapping))):
            raise ValueError(f"mapping {self.mapping} is not a permutation")

    def __getitem__(self, cluster: int) -> int:
        return self.mapping[cluster]


@dataclass(frozen=True)
class ClassifierModel:
    kmeans: KMeansModel
    permutation: LabelPermutation
    mode: str  # "prior" or "posterior"


def _pairwise_sq_dists(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    diff = points[:, None, :] - centroids[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def _seed_centroids(points: np.ndarray, k: int, rng: np.random.Generator):
    """k-means++ seeding: each next centroid drawn with probability ~ D^2."""
    n = len(points)
    chosen = [int(rng.integers(n))]
    d2 = ((points - points[chosen[0]]) ** 2).sum(axis=1)
    for _ in range(1, k):
        probs = d2 / d2.sum()
        nxt = int(rng.choice(n, p=probs))
        chosen.append(nxt)
        d2 = np.minimum(d2, ((points - points[nxt]) ** 2).sum(axis=1))
    return points[chosen].copy()


def kmeans_fit(points: np.ndarray, k: int, seed: int) -> KMeansModel:
    """Lloyd's algorithm to an assignment fixpoint (or 300 iterations).

    Empty clusters are repaired by handing them the point currently
    farthest from its own centroid, so the model always has exactly k
    centroids. Deterministic for a given (points, k, seed).
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise ValueError("points must be a 2-D array")
    if k < 1:
        raise ValueError("k must be at least 1")
    if len(np.unique(points, axis=0)) < k:
        raise ValueError(f"need at least {k} distinct points")

    rng = np.random.default_rng(seed)
    centroids = _seed_centroids(points, k, rng)
    prev = None
    wcss_path = []
    for _ in range(_MAX_LLOYD_ITERS):
        d2 = _pairwise_sq_dists(points, centroids)
        assign_ids = d2.argmin(axis=1)  # ties resolve to the lowest index
        counts = np.bincount(assign_ids, minlength=k)
        if np.any(counts == 0):
            own_dist = d2[np.arange(len(points)), assign_ids]
            stolen: set[int] = set()
            for empty in np.flatnonzero(counts == 0):
                candidates = own_dist.copy()
                candidates[list(stolen)] = -np.inf
                far = int(candidates.argmax())
                assign_ids[far] = empty
                stolen.add(far)
            counts = np.bincount(assign_ids, minlength=k)
        if prev is not None and np.array_equal(assign_ids, prev):
            break
        for c in range(k):
            centroids[c] = points[assign_ids == c].mean(axis=0)
        wcss = float(
            ((points - centroids[assign_ids]) ** 2).sum()
        )
        wcss_path.append(wcss)
        prev = assign_ids
    return KMeansModel(
        centroids=centroids, k=k, seed=seed, wcss_path=tuple(wcss_path)
    )


def assign(model: KMeansModel, point: np.ndarray) -> int:
    """Index of the nearest centroid (Euclidean); ties go to the lowest index."""
    point = np.asarray(point, dtype=np.float64)
    if point.shape != (model.centroids.shape[1],):
        raise ValueError(
            f"point has dimension {point.shape}, centroids expect "
            f"({model.centroids.shape[1]},)"
        )
    d2 = ((model.centroids - point) ** 2).sum(axis=1)
    return int(d2.argmin())


def assign_many(model: KMeansModel, points: np.ndarray) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64)
    return _pairwise_sq_dists(points, model.centroids).argmin(axis=1)


def hungarian(cost: np.ndarray) -> np.ndarray:
    """Optimal row-to-column assignment minimizing total cost.

    Accepts a square matrix of finite costs and returns the permutation
    sigma with sigma[row] = column.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1]:
        raise ValueError(f"cost matrix must be square, got {cost.shape}")
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix contains non-finite entries")
    rows, cols = linear_sum_assignment(cost)
    sigma = np.empty(cost.shape[0], dtype=np.int64)
    sigma[rows] = cols
    return sigma


def fit_permutation(cluster_ids, labels, k: int) -> LabelPermutation:
    """Cluster -> label mapping maximizing total agreement.

    Builds the confusion counts and minimizes the complemented counts with
    the assignment solver, which is equivalent to maximizing agreement.
    """
    cluster_ids = np.asarray(cluster_ids)
    labels = np.asarray(labels)
    if cluster_ids.shape != labels.shape:
        raise ValueError("cluster_ids and labels must have equal length")
    for name, values in (("cluster_ids", cluster_ids), ("labels", labels)):
        if values.size and (values.min() < 0 or values.max() >= k):
            raise ValueError(f"{name} must lie in 0..{k - 1}")
    counts = np.zeros((k, k))
    np.add.at(counts, (cluster_ids, labels), 1.0)
    sigma = hungarian(counts.max() - counts)
    return LabelPermutation(mapping=tuple(int(c) for c in sigma))


def classify(model: ClassifierModel, presence: np.ndarray) -> int:
    """Predicted class label for one presence vector."""
    return model.permutation[assign(model.kmeans, presence)]


def classify_many(model: ClassifierModel, presences: np.ndarray) -> np.ndarray:
    clusters = assign_many(model.kmeans, presences)
    mapping = np.asarray(model.permutation.mapping)
    return mapping[clusters]


def save_classifier(model: ClassifierModel, path) -> None:
    """Write the little-endian binary classifier file."""
    centroids = np.ascontiguousarray(model.kmeans.centroids, dtype=np.float64)
    k, dim = centroids.shape
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _VERSION))
        fh.write(struct.pack("<B", _MODE_CODES[model.mode]))
        fh.write(struct.pack("<2I", k, dim))
        fh.write(centroids.tobytes())
        fh.write(struct.pack(f"<{k}I", *model.permutation.mapping))


def load_classifier(path) -> ClassifierModel:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _MAGIC:
        raise ClassifierFormatError(f"{path}: bad magic {blob[:4]!r}")
    try:
        (version,) = struct.unpack_from("<I", blob, 4)
        (mode_code,) = struct.unpack_from("<B", blob, 8)
        k, dim = struct.unpack_from("<2I", blob, 9)
        offset = 17
        centroids = np.frombuffer(blob, dtype="<f8", count=k * dim, offset=offset)
        offset += 8 * k * dim
        mapping = struct.unpack_from(f"<{k}I", blob, offset)
        offset += 4 * k
    except (struct.error, ValueError) as exc:
        raise ClassifierFormatError(f"{path}: truncated payload") from exc
    if version != _VERSION:
        raise ClassifierFormatError(f"{path}: unsupported version {version}")
    if mode_code not in _MODE_NAMES:
        raise ClassifierFormatError(f"{path}: unknown mode code {mode_code}")
    if offset != len(blob):
        raise ClassifierFormatError(f"{path}: trailing bytes after payload")
    return ClassifierModel(
        kmeans=KMeansModel(
            centroids=centroids.reshape(k, dim).copy(), k=k, seed=-1
        ),
        permutation=LabelPermutation(mapping=tuple(int(c) for c in mapping)),
        mode=_MODE_NAMES[mode_code],
    )
