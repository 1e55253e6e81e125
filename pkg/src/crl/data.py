"""Datasets of pre-embedded entity-pair features, task streams and synthetic data."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Sequence

import numpy as np

log = logging.getLogger(__name__)


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class Example:
    id: int
    label: int
    features: np.ndarray


@dataclass
class Dataset:
    """Parallel arrays of ids, dense label ids and feature rows.

    ``vocab[label]`` is the original relation name.
    """

    ids: np.ndarray
    labels: np.ndarray
    features: np.ndarray
    vocab: List[str]
    meta: Dict = field(default_factory=dict)

    def __post_init__(self):
        if len(set(self.ids.tolist())) != len(self.ids):
            raise DatasetError("duplicate example ids")
        self._pos = {int(i): p for p, i in enumerate(self.ids)}

    def __len__(self):
        return self.ids.shape[0]

    def __iter__(self) -> Iterator[Example]:
        for i, y, x in zip(self.ids, self.labels, self.features):
            yield Example(int(i), int(y), x)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def positions(self, ids: Sequence[int]) -> np.ndarray:
        return np.array([self._pos[int(i)] for i in ids], dtype=int)

    def lookup(self, ids: Sequence[int]):
        """(features, labels) for the given example ids."""
        p = self.positions(ids)
        return self.features[p], self.labels[p]

    def subset(self, mask_or_positions) -> "Dataset":
        sel = np.asarray(mask_or_positions)
        return Dataset(self.ids[sel], self.labels[sel], self.features[sel], self.vocab, self.meta)


def load_jsonl(path) -> Dataset:
    """Read one ``{"id", "label", "features"}`` record per line."""
    ids, labels, rows = [], [], []
    vocab: Dict[str, int] = {}
    seen = set()
    dim = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                rid, label, feats = rec["id"], rec["label"], rec["features"]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise DatasetError(f"line {lineno}: malformed record ({exc})") from None
            if not isinstance(rid, int) or isinstance(rid, bool):
                raise DatasetError(f"line {lineno}: id must be an integer")
            if not isinstance(label, str):
                raise DatasetError(f"line {lineno}: label must be a string")
            try:
                vec = np.asarray(feats, dtype=float)
            except (TypeError, ValueError):
                raise DatasetError(f"line {lineno}: features must be numbers") from None
            if vec.ndim != 1:
                raise DatasetError(f"line {lineno}: features must be a flat array")
            if dim is None:
                dim = vec.shape[0]
            elif vec.shape[0] != dim:
                raise DatasetError(f"line {lineno}: feature length {vec.shape[0]} != {dim}")
            if rid in seen:
                raise DatasetError(f"line {lineno}: duplicate id {rid}")
            seen.add(rid)
            ids.append(rid)
            labels.append(vocab.setdefault(label, len(vocab)))
            rows.append(vec)
    if not ids:
        raise DatasetError("empty dataset")
    return Dataset(np.array(ids), np.array(labels), np.vstack(rows), list(vocab))


def save_jsonl(dataset: Dataset, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in dataset:
            rec = {"id": ex.id, "label": dataset.vocab[ex.label],
                   "features": ex.features.tolist()}
            fh.write(json.dumps(rec) + "\n")


@dataclass
class Task:
    relations: List[int]
    train: Dataset
    valid: Dataset
    test: Dataset


@dataclass
class TaskStream:
    tasks: List[Task]

    def __len__(self):
        return len(self.tasks)

    def __iter__(self):
        return iter(self.tasks)


def split_relations(relations: Sequence[int], K: int, seed) -> List[List[int]]:
    """Seeded permutation of relations dealt into K groups differing in size by at most 1."""
    relations = sorted(relations)
    if K < 1 or K > len(relations):
        raise ValueError(f"cannot split {len(relations)} relations into {K} tasks")
    perm = np.random.default_rng(seed).permutation(relations)
    return [sorted(int(r) for r in g) for g in np.array_split(perm, K)]


def tri_split_counts(n: int):
    """3:1:1 train/test/valid sizes, rounding in favour of train, then test."""
    n_train = math.ceil(3 * n / 5)
    n_test = math.ceil((n - n_train) / 2)
    return n_train, n_test, n - n_train - n_test


def tri_split(dataset: Dataset, seed):
    """Per-relation seeded shuffle, then a 3:1:1 train/test/valid partition."""
    rng = np.random.default_rng(seed)
    parts = ([], [], [])
    for rel in np.unique(dataset.labels):
        pos = np.flatnonzero(dataset.labels == rel)
        pos = pos[rng.permutation(pos.size)]
        n_train, n_test, _ = tri_split_counts(pos.size)
        if pos.size < 5:
            log.warning("relation %s has only %d examples", dataset.vocab[rel], pos.size)
        parts[0].append(pos[:n_train])
        parts[1].append(pos[n_train:n_train + n_test])
        parts[2].append(pos[n_train + n_test:])
    return tuple(dataset.subset(np.sort(np.concatenate(p))) for p in parts)


def split_tasks(dataset: Dataset, K: int, seed) -> TaskStream:
    """Random relation-to-task partition, each task carrying its own 3:1:1 split."""
    groups = split_relations(np.unique(dataset.labels).tolist(), K, seed)
    train, test, valid = tri_split(dataset, seed)
    tasks = []
    for rels in groups:
        def pick(ds):
            return ds.subset(np.isin(ds.labels, rels))
        tasks.append(Task(rels, pick(train), pick(valid), pick(test)))
    return TaskStream(tasks)


def synth_stream(n_classes: int, dim: int, counts, sigma: float,
                 center_scale: float = 1.0, seed=0) -> Dataset:
    """Gaussian class clusters: seeded random centers plus isotropic noise of scale sigma.

    ``counts`` is an int (balanced) or one count per class.
    """
    if n_classes < 2:
        raise ValueError("need at least two classes")
    counts = np.broadcast_to(np.asarray(counts, dtype=int), (n_classes,)).copy()
    if np.any(counts < 1):
        raise ValueError("every class needs at least one example")
    rng = np.random.default_rng(seed)
    centers = rng.normal(0.0, center_scale, size=(n_classes, dim))
    labels = np.repeat(np.arange(n_classes), counts)
    feats = centers[labels] + rng.normal(0.0, 1.0, size=(labels.size, dim)) * sigma
    vocab = [f"rel{c:03d}" for c in range(n_classes)]
    meta = {"sigma": sigma, "center_scale": center_scale, "centers": centers,
            "counts": counts}
    return Dataset(np.arange(labels.size), labels, feats, vocab, meta)


def total_for_train(n_train: int) -> int:
    """Smallest class size whose 3:1:1 split gives ``n_train`` training examples."""
    n = max(1, math.floor(5 * n_train / 3))
    while tri_split_counts(n)[0] < n_train:
        n += 1
    return n


def imbalanced_counts(n_classes: int, low: int = 20, high: int = 320, seed=0) -> np.ndarray:
    """Per-class training counts drawn uniformly from [low, high]."""
    return np.random.default_rng(seed).integers(low, high + 1, size=n_classes)
