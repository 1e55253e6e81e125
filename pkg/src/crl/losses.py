"""Loss kernels: supervised contrastive loss against a memory bank, contrastive
replay over the full bank, and KL distillation of prototype similarity.

Every loss returns its value together with the gradient with respect to the
batch's fresh unit embeddings. Bank rows are treated as constants.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.special import logsumexp

from .prototypes import cosine_knowledge, cosine_knowledge_grad


@dataclass
class LossOutput:
    value: float
    grads: np.ndarray  # (batch, d_z), d value / d anchor embedding
    skipped_anchors: int = 0


def _check_tau(tau: float) -> None:
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")


def supcon_loss(anchors: np.ndarray, labels: Sequence[int], bank_index: Sequence[int],
                bank, candidates: Sequence[int], tau: float) -> LossOutput:
    """Supervised contrastive loss of fresh anchors against sampled bank rows.

    For anchor ``i`` the comparison pool is ``candidates`` minus the anchor's
    own row ``bank_index[i]``; positives are pool rows sharing its label. The
    per-anchor term is ``logsumexp(pool) - mean(positives)`` on logits
    ``z_i . m_j / tau``. Anchors without positives add nothing and are counted.
    """
    _check_tau(tau)
    candidates = np.asarray(candidates, dtype=int)
    if candidates.size == 0:
        raise ValueError("empty comparison set")
    anchors = np.asarray(anchors, dtype=float)
    labels = np.asarray(labels)
    bank_index = np.asarray(bank_index, dtype=int)
    n = anchors.shape[0]
    if labels.shape[0] != n or bank_index.shape[0] != n:
        raise ValueError("anchors, labels and bank_index must have equal length")
    if np.any(bank_index >= len(bank)) or np.any(candidates >= len(bank)):
        raise IndexError("bank index out of range")

    pool = bank.rows[candidates]
    pool_labels = bank.labels[candidates]
    logits = anchors @ pool.T / tau

    keep = candidates[None, :] != bank_index[:, None]
    if not np.all(keep.any(axis=1)):
        raise ValueError("comparison set is empty after removing the anchor's own row")
    pos = keep & (pool_labels[None, :] == labels[:, None])
    n_pos = pos.sum(axis=1)
    has_pos = n_pos > 0
    masked = np.where(keep, logits, -np.inf)
    lse = logsumexp(masked, axis=1)
    weights = np.exp(masked - lse[:, None])
    safe_n = np.maximum(n_pos, 1)
    pos_mean_logit = np.where(pos, logits, 0.0).sum(axis=1) / safe_n
    value = np.sum((lse - pos_mean_logit)[has_pos])
    grads = (weights @ pool - (pos @ pool) / safe_n[:, None]) / tau
    grads[~has_pos] = 0.0
    skipped = int(np.sum(~has_pos))
    return LossOutput(float(value), grads, skipped)


def replay_con_loss(anchors: np.ndarray, labels: Sequence[int],
                    bank_index: Sequence[int], bank, tau: float) -> LossOutput:
    """Contrastive replay: the pool is the whole replay bank (minus self)."""
    return supcon_loss(anchors, labels, bank_index, bank, np.arange(len(bank)), tau)


def softmax_rows(similarities: np.ndarray, tau: float) -> np.ndarray:
    _check_tau(tau)
    s = np.asarray(similarities, dtype=float) / tau
    if not np.all(np.isfinite(s)):
        raise ValueError("similarities must be finite")
    s = s - s.max(axis=1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=1, keepdims=True)


def kl_rows(p: np.ndarray, log_q: np.ndarray) -> float:
    """sum_i KL(P_i || Q_i) given P and log Q."""
    p = np.asarray(p, dtype=float)
    log_p = np.log(np.where(p > 0, p, 1.0))
    return float(np.sum(p * (log_p - log_q)))


def kd_from_prototypes(p_ref: np.ndarray, protos: np.ndarray, tau: float):
    """KL between frozen memory knowledge and the knowledge of ``protos``.

    Returns ``(value, d value / d protos)``.
    """
    _check_tau(tau)
    p_ref = np.asarray(p_ref, dtype=float)
    protos = np.asarray(protos, dtype=float)
    if p_ref.shape != (protos.shape[0], protos.shape[0]):
        raise ValueError(f"class-set mismatch: P_ref {p_ref.shape} vs {protos.shape[0]} prototypes")
    a = cosine_knowledge(protos)
    s = a / tau
    log_q = s - logsumexp(s, axis=1, keepdims=True)
    q = np.exp(log_q)
    value = kl_rows(p_ref, log_q)
    # d/d a_ij of sum_i KL(P_i||Q_i), using rows of P summing to one
    d_a = (q - p_ref) / tau
    return value, cosine_knowledge_grad(protos, d_a)


def temporary_prototypes(bank, class_ids: Sequence[int],
                         batch_index: Optional[Sequence[int]] = None,
                         fresh: Optional[np.ndarray] = None):
    """Per-class means of bank rows with in-batch rows swapped for fresh embeddings.

    Returns ``(protos, counts)`` in ``class_ids`` order.
    """
    rows = bank.rows.copy()
    if batch_index is not None and len(batch_index):
        rows[np.asarray(batch_index, dtype=int)] = fresh
    protos = np.empty((len(class_ids), rows.shape[1]))
    counts = np.empty(len(class_ids), dtype=int)
    for c, cid in enumerate(class_ids):
        members = bank.labels == cid
        counts[c] = members.sum()
        if counts[c] == 0:
            raise ValueError(f"class {cid} has no rows in the bank")
        protos[c] = rows[members].mean(axis=0)
    return protos, counts


def kd_loss(p_ref: np.ndarray, class_ids: Sequence[int], fresh: np.ndarray,
            batch_index: Sequence[int], bank, tau: float) -> LossOutput:
    """Memory-knowledge distillation for one replay batch.

    Temporary prototypes over ``class_ids`` are computed from the replay bank
    with this batch's rows replaced by their fresh embeddings, so gradients
    reach exactly the in-batch members of those classes.
    """
    fresh = np.asarray(fresh, dtype=float)
    batch_index = np.asarray(batch_index, dtype=int)
    protos, counts = temporary_prototypes(bank, class_ids, batch_index, fresh)
    value, d_protos = kd_from_prototypes(p_ref, protos, tau)
    grads = np.zeros_like(fresh)
    slot = {cid: c for c, cid in enumerate(class_ids)}
    for i, idx in enumerate(batch_index):
        c = slot.get(bank.labels[idx])
        if c is not None:
            grads[i] = d_protos[c] / counts[c]
    return LossOutput(value, grads, 0)
