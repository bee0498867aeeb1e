"""Sketch collections for nearest-neighbor expert prediction.

A collection stores flattened, row-normalized activation sketches, either the
most recent N request matrices or k-means centroids of all of them, and
answers cosine nearest-sketch queries. Euclidean k-means on normalized
sketches is a deliberate simplification: on row-normalized vectors the
Euclidean and cosine orderings are closely aligned.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .core import (
    ActivationMatrix,
    ConfigError,
    DimensionError,
    ModelShape,
    normalize,
)


@dataclass(frozen=True)
class EamcConfig:
    """Construction settings for a sketch collection.

    ``mode`` is "recent" (keep the last ``capacity`` sketches) or "kmeans"
    (cluster all sketches into ``capacity`` centroids). ``binarize``
    thresholds counts to 0/1 before normalization, storing pure support
    patterns instead of visit frequencies.
    """

    mode: str = "recent"
    capacity: int = 100
    binarize: bool = False
    kmeans_max_iters: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("recent", "kmeans"):
            raise ConfigError(f"mode must be 'recent' or 'kmeans', got {self.mode!r}")
        if self.capacity < 1:
            raise ConfigError(f"capacity must be >= 1, got {self.capacity}")
        if self.kmeans_max_iters < 1:
            raise ConfigError(
                f"kmeans_max_iters must be >= 1, got {self.kmeans_max_iters}"
            )


@dataclass
class KMeansResult:
    centroids: np.ndarray
    assignments: np.ndarray
    objective: float
    objective_history: list[float] = field(default_factory=list)
    effective_k: int = 0


def _squared_distances(vectors: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Pairwise squared Euclidean distances, clipped at zero for float safety."""
    sq = (
        (vectors * vectors).sum(axis=1)[:, None]
        - 2.0 * vectors @ centroids.T
        + (centroids * centroids).sum(axis=1)[None, :]
    )
    return np.maximum(sq, 0.0)


def _plusplus_init(vectors: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = vectors.shape[0]
    centroids = np.empty((k, vectors.shape[1]), dtype=np.float64)
    first = int(rng.integers(0, n))
    centroids[0] = vectors[first]
    d2 = _squared_distances(vectors, centroids[:1]).reshape(-1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            idx = int(rng.integers(0, n))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centroids[j] = vectors[idx]
        d2 = np.minimum(d2, _squared_distances(vectors, centroids[j:j + 1]).reshape(-1))
    return centroids


def kmeans(vectors: np.ndarray, k: int, seed: int = 0,
           max_iters: int = 100) -> KMeansResult:
    """Lloyd's algorithm with seeded k-means++ initialization.

    Stops on stable assignments or after ``max_iters`` iterations. Empty
    clusters are re-seeded with the point currently farthest from its
    assigned centroid. ``k`` larger than the number of points is reduced to
    it (reported via ``effective_k``, not an error). The recorded objective
    (sum of squared distances to assigned centroids) is non-increasing across
    iterations.
    """
    vectors = np.asarray(vectors, dtype=np.float64)
    if vectors.ndim != 2 or vectors.shape[0] < 1:
        raise DimensionError("kmeans needs a non-empty 2-D array of vectors")
    n = vectors.shape[0]
    k = min(k, n)
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    rng = np.random.default_rng(seed)
    centroids = _plusplus_init(vectors, k, rng)

    assignments = np.full(n, -1, dtype=np.int64)
    history: list[float] = []
    for _ in range(max_iters):
        d2 = _squared_distances(vectors, centroids)
        new_assignments = d2.argmin(axis=1)
        point_d2 = d2[np.arange(n), new_assignments]

        # Re-seed empty clusters from the farthest-out points, one each.
        empty = [j for j in range(k) if not (new_assignments == j).any()]
        if empty:
            order = np.argsort(-point_d2, kind="stable")
            for taken, j in enumerate(empty):
                centroids[j] = vectors[int(order[taken])]
            d2 = _squared_distances(vectors, centroids)
            new_assignments = d2.argmin(axis=1)
            point_d2 = d2[np.arange(n), new_assignments]

        history.append(float(point_d2.sum()))
        if np.array_equal(new_assignments, assignments):
            break
        assignments = new_assignments
        for j in range(k):
            members = vectors[assignments == j]
            if len(members):
                centroids[j] = members.mean(axis=0)

    d2 = _squared_distances(vectors, centroids)
    assignments = d2.argmin(axis=1)
    objective = float(d2[np.arange(n), assignments].sum())
    return KMeansResult(centroids, assignments, objective, history, k)


class SketchCollection:
    """Immutable set of stored sketches queried by cosine similarity."""

    def __init__(self, sketches: np.ndarray, config: EamcConfig, shape: ModelShape):
        sketches = np.asarray(sketches, dtype=np.float64)
        if sketches.ndim != 2 or sketches.shape[1] != shape.total_experts:
            raise DimensionError(
                f"sketches must be 2-D with row length {shape.total_experts}"
            )
        if sketches.shape[0] > config.capacity:
            raise ConfigError(
                f"{sketches.shape[0]} sketches exceed capacity {config.capacity}"
            )
        self.sketches = sketches
        self.config = config
        self.shape = shape
        norms = np.linalg.norm(sketches, axis=1)
        safe = np.where(norms > 0, norms, 1.0)
        self._unit = sketches / safe[:, None]

    def __len__(self) -> int:
        return self.sketches.shape[0]

    def match_nearest(self, query: np.ndarray) -> tuple[int, float]:
        """Index and similarity of the sketch with maximal cosine to ``query``.

        Ties (including an all-zero query, which is similarity 0 to every
        sketch) resolve to the lowest index.
        """
        if len(self) == 0:
            raise ConfigError("no sketches in collection")
        query = np.asarray(query, dtype=np.float64)
        if query.shape != (self.sketches.shape[1],):
            raise DimensionError(
                f"query length {query.shape} != sketch length "
                f"{self.sketches.shape[1]}"
            )
        qnorm = float(np.linalg.norm(query))
        if qnorm == 0.0:
            return 0, 0.0
        sims = self._unit @ (query / qnorm)
        idx = int(np.argmax(sims))
        return idx, float(np.clip(sims[idx], -1.0, 1.0))

    def layer_block(self, index: int, layer_id: int) -> np.ndarray:
        """The E weights of one stored sketch at one layer."""
        e = self.shape.num_experts
        return self.sketches[index, layer_id * e:(layer_id + 1) * e]


def _sketch_from_matrix(matrix: ActivationMatrix, binarize: bool) -> np.ndarray:
    if binarize:
        matrix = ActivationMatrix(
            matrix.shape, (matrix.counts > 0).astype(np.int64)
        )
    return normalize(matrix)


def build_eamc(matrices: list[ActivationMatrix], config: EamcConfig) -> SketchCollection:
    """Build a collection from request-level activation matrices.

    Recent mode keeps the last ``capacity`` inputs in order; kmeans mode
    clusters all of them into ``capacity`` centroids.
    """
    if not matrices:
        raise ConfigError("at least one activation matrix is required")
    shape = matrices[0].shape
    vectors = np.stack([_sketch_from_matrix(m, config.binarize) for m in matrices])
    if config.mode == "recent":
        sketches = vectors[-config.capacity:]
    else:
        result = kmeans(vectors, config.capacity, seed=config.seed,
                        max_iters=config.kmeans_max_iters)
        sketches = result.centroids
    return SketchCollection(sketches, config, shape)


def save_eamc(collection: SketchCollection, path) -> None:
    """Persist a collection as JSON with exact decimal float serialization."""
    payload = {
        "mode": collection.config.mode,
        "capacity": collection.config.capacity,
        "binarize": collection.config.binarize,
        "kmeans_max_iters": collection.config.kmeans_max_iters,
        "seed": collection.config.seed,
        "num_layers": collection.shape.num_layers,
        "num_experts": collection.shape.num_experts,
        "top_k": collection.shape.top_k,
        "sketches": [[float(v) for v in row] for row in collection.sketches],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)
        fh.write("\n")


def load_eamc(path) -> SketchCollection:
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    try:
        config = EamcConfig(
            mode=payload["mode"],
            capacity=payload["capacity"],
            binarize=payload["binarize"],
            kmeans_max_iters=payload["kmeans_max_iters"],
            seed=payload["seed"],
        )
        shape = ModelShape(payload["num_layers"], payload["num_experts"],
                           payload["top_k"])
        sketches = np.asarray(payload["sketches"], dtype=np.float64)
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"bad sketch collection file {path}: {exc}") from None
    if sketches.size == 0:
        raise ConfigError(f"no sketches in {path}")
    return SketchCollection(sketches, config, shape)
