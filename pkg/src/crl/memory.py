"""Memory bank, episodic exemplar memory and k-means exemplar selection."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np

from .encoder import EncoderParams, embed


@dataclass
class MemoryBank:
    """One unit embedding per example, row-addressed.

    ``ids`` holds the example id behind each row; ``role`` is ``"init"`` for the
    per-task bank and ``"replay"`` for the bank over episodic memory.
    """

    rows: np.ndarray
    labels: np.ndarray
    ids: np.ndarray
    role: str = "init"

    def __len__(self):
        return self.rows.shape[0]


def init_bank(params: EncoderParams, features: np.ndarray, labels: Sequence[int],
              ids: Optional[Sequence[int]] = None, role: str = "init") -> MemoryBank:
    features = np.asarray(features, dtype=float)
    if features.ndim != 2 or features.shape[0] == 0:
        raise ValueError("cannot initialize a bank from no examples")
    if ids is None:
        ids = np.arange(features.shape[0])
    return MemoryBank(embed(features, params), np.asarray(labels).copy(),
                      np.asarray(ids).copy(), role)


def update_bank(bank: MemoryBank, indices: Sequence[int], fresh: np.ndarray) -> None:
    """Overwrite ``bank.rows[indices]`` with ``fresh``; nothing else is touched."""
    indices = np.asarray(indices, dtype=int)
    if indices.size == 0:
        return
    fresh = np.asarray(fresh, dtype=float).reshape(indices.size, -1)
    if np.any(indices < 0) or np.any(indices >= len(bank)):
        raise IndexError(f"bank index out of range [0, {len(bank)})")
    if fresh.shape[1] != bank.rows.shape[1]:
        raise ValueError("embedding width does not match bank")
    bank.rows[indices] = fresh


def sample_indices(bank_size: int, count: int, rng: np.random.Generator,
                   exclude: Iterable[int] = ()) -> np.ndarray:
    """Uniform sample without replacement from ``range(bank_size)`` minus ``exclude``."""
    excluded = np.zeros(bank_size, dtype=bool)
    excluded[np.asarray(list(exclude), dtype=int)] = True
    pool = np.flatnonzero(~excluded)
    if count < 1 or count > pool.size:
        raise ValueError(f"cannot draw {count} indices from {pool.size} candidates")
    return np.sort(rng.choice(pool, size=count, replace=False))


@dataclass
class KMeansResult:
    assignments: np.ndarray
    centroids: np.ndarray
    objective_history: List[float]
    n_iter: int


def _sq_dists(points, centroids):
    return np.sum((points[:, None, :] - centroids[None, :, :]) ** 2, axis=2)


def _plus_plus_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    chosen = [int(rng.integers(n))]
    d2 = ((points - points[chosen[0]]) ** 2).sum(axis=1)
    for _ in range(1, k):
        weights = d2.copy()
        weights[chosen] = 0.0
        total = weights.sum()
        if total > 0:
            idx = int(rng.choice(n, p=weights / total))
        else:  # remaining points duplicate chosen ones; stay distinct by index
            idx = int(rng.choice(np.setdiff1d(np.arange(n), chosen)))
        chosen.append(idx)
        d2 = np.minimum(d2, ((points - points[idx]) ** 2).sum(axis=1))
    return np.array(chosen)


def kmeans(points: np.ndarray, k: int, seed=0, max_iters: int = 100,
           n_init: int = 10) -> KMeansResult:
    """Lloyd's algorithm with k distinct seeded-random points as initial centroids.

    The initial points are drawn with k-means++ (D^2) weighting; ``n_init``
    seeded restarts are run and the one with the lowest final objective is
    kept, which avoids the local minima a single draw can fall into.

    An empty cluster is re-seeded at the point farthest from its own centroid.
    ``objective_history`` (of the kept run) records the within-cluster SSE
    after each assignment step and is non-increasing.
    """
    points = np.asarray(points, dtype=float)
    if points.ndim == 1:
        points = points[:, None]
    n = points.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k={k} must be in [1, {n}]")
    if n_init < 1:
        raise ValueError("n_init must be >= 1")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(n_init):
        res = _lloyd(points, points[_plus_plus_init(points, k, rng)].copy(), max_iters)
        if best is None or res.objective_history[-1] < best.objective_history[-1]:
            best = res
    return best


def _lloyd(points: np.ndarray, centroids: np.ndarray, max_iters: int) -> KMeansResult:
    n, k = points.shape[0], centroids.shape[0]
    history: List[float] = []
    assign = None
    it = 0
    for it in range(1, max_iters + 1):
        d2 = _sq_dists(points, centroids)
        new_assign = np.argmin(d2, axis=1)
        history.append(float(d2[np.arange(n), new_assign].sum()))
        if assign is not None and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        own = d2[np.arange(n), assign]
        taken = set()
        for c in range(k):
            members = assign == c
            if members.any():
                centroids[c] = points[members].mean(axis=0)
            else:
                for idx in np.argsort(-own, kind="stable"):
                    if idx not in taken:
                        taken.add(int(idx))
                        centroids[c] = points[idx]
                        break
    return KMeansResult(new_assign, centroids, history, it)


def select_exemplars(ids: Sequence[int], embeddings: np.ndarray, memory_size: int,
                     seed=0, max_iters: int = 100) -> np.ndarray:
    """Pick up to ``memory_size`` example ids: the member nearest each k-means centroid."""
    ids = np.asarray(ids)
    embeddings = np.asarray(embeddings, dtype=float)
    if ids.size == 0:
        raise ValueError("empty class")
    if ids.size <= memory_size:
        return np.sort(ids)
    res = kmeans(embeddings, memory_size, seed=seed, max_iters=max_iters)
    d2 = _sq_dists(embeddings, res.centroids)
    chosen: List[int] = []
    used = np.zeros(ids.size, dtype=bool)
    for c in range(memory_size):
        members = np.flatnonzero((res.assignments == c) & ~used)
        if members.size == 0:
            # can only happen if max_iters stopped right after a re-seed
            members = np.flatnonzero(~used)
        # nearest to centroid, ties by smallest example id
        best = min(members, key=lambda m: (d2[m, c], ids[m]))
        used[best] = True
        chosen.append(ids[best])
    return np.array(chosen)


@dataclass
class EpisodicMemory:
    """Stored exemplars (ids and feature rows) per relation, plus observed relations."""

    exemplars: Dict[int, np.ndarray] = field(default_factory=dict)
    features: Dict[int, np.ndarray] = field(default_factory=dict)
    observed: List[int] = field(default_factory=list)

    def store(self, relation: int, ids: Sequence[int], features: np.ndarray) -> None:
        """Replace the exemplars of ``relation``."""
        ids = np.asarray(ids).copy()
        features = np.asarray(features, dtype=float).reshape(ids.size, -1).copy()
        self.exemplars[relation] = ids
        self.features[relation] = features
        if relation not in self.observed:
            self.observed.append(relation)

    def contents(self):
        """(ids, labels, features) over all relations in observation order."""
        if not self.observed:
            raise ValueError("episodic memory is empty")
        ids = np.concatenate([self.exemplars[r] for r in self.observed])
        labels = np.concatenate([np.full(self.exemplars[r].size, r) for r in self.observed])
        feats = np.vstack([self.features[r] for r in self.observed])
        return ids, labels, feats

    def __len__(self):
        return sum(v.size for v in self.exemplars.values())
