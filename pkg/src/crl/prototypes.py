"""Class prototypes, cosine knowledge matrices and nearest-class-mean prediction."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np


@dataclass
class PrototypeSet:
    class_ids: list
    vectors: np.ndarray  # (C, d_z)
    counts: np.ndarray  # (C,)

    def __len__(self):
        return len(self.class_ids)


def compute_prototypes(members: Mapping[int, np.ndarray]) -> PrototypeSet:
    """Mean embedding per class, in the mapping's iteration order."""
    class_ids, vectors, counts = [], [], []
    for cid, rows in members.items():
        rows = np.atleast_2d(np.asarray(rows, dtype=float))
        if rows.shape[0] == 0 or rows.size == 0:
            raise ValueError(f"class {cid} has no members")
        class_ids.append(cid)
        vectors.append(rows.mean(axis=0))
        counts.append(rows.shape[0])
    return PrototypeSet(class_ids, np.array(vectors), np.array(counts))


def prototypes_from_rows(rows: np.ndarray, labels: np.ndarray,
                         class_ids: Sequence[int]) -> PrototypeSet:
    return compute_prototypes({c: rows[labels == c] for c in class_ids})


def _unit_rows(vectors: np.ndarray):
    vectors = np.asarray(vectors, dtype=float)
    norms = np.linalg.norm(vectors, axis=1)
    if np.any(norms == 0):
        raise ValueError("zero-norm prototype")
    return vectors / norms[:, None], norms


def cosine_knowledge(protos) -> np.ndarray:
    """a_ij = cos(p_i, p_j). Accepts a PrototypeSet or a (C, d) array."""
    vectors = protos.vectors if isinstance(protos, PrototypeSet) else protos
    u, _ = _unit_rows(vectors)
    a = u @ u.T
    # exact symmetry and unit diagonal; u u^T can drift by an ulp
    a = 0.5 * (a + a.T)
    np.fill_diagonal(a, 1.0)
    return np.clip(a, -1.0, 1.0)


def cosine_knowledge_grad(vectors: np.ndarray, d_a: np.ndarray) -> np.ndarray:
    """Backprop an upstream gradient on the cosine matrix to the prototype vectors.

    Entries of the matrix are treated as independent outputs, so ``d_a`` need
    not be symmetric. The diagonal is constant and gets no gradient.
    """
    u, norms = _unit_rows(vectors)
    g = np.array(d_a, dtype=float)
    np.fill_diagonal(g, 0.0)
    d_u = (g + g.T) @ u
    radial = np.sum(u * d_u, axis=1, keepdims=True)
    return (d_u - u * radial) / norms[:, None]


def ncm_predict(query: np.ndarray, protos: PrototypeSet):
    """Class id of the nearest prototype (Euclidean); ties go to the smallest id.

    ``query`` may be a single vector or a batch of rows; the return type follows.
    """
    if len(protos) == 0:
        raise ValueError("no prototypes")
    q = np.asarray(query, dtype=float)
    single = q.ndim == 1
    q = np.atleast_2d(q)
    if q.shape[1] != protos.vectors.shape[1]:
        raise ValueError(f"query dim {q.shape[1]} != prototype dim {protos.vectors.shape[1]}")
    order = np.argsort(np.asarray(protos.class_ids), kind="stable")
    vecs = protos.vectors[order]
    ids = np.asarray(protos.class_ids)[order]
    d2 = np.sum((q[:, None, :] - vecs[None, :, :]) ** 2, axis=2)
    pred = ids[np.argmin(d2, axis=1)]  # argmin returns the first (smallest id) on ties
    return pred[0] if single else pred
