"""Continual training loop: contrastive training on each new task, k-means
exemplar memory, contrastive replay with memory-knowledge distillation, and
nearest-class-mean evaluation after every task.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .data import Dataset, Task, TaskStream
from .encoder import EncoderParams, MomentumSGD, backward, embed, forward
from .losses import kd_loss, replay_con_loss, softmax_rows, supcon_loss
from .memory import (EpisodicMemory, init_bank, sample_indices, select_exemplars,
                     update_bank)
from .prototypes import cosine_knowledge, compute_prototypes, ncm_predict

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs_init: int = 10
    epochs_replay: int = 10
    batch_size: int = 32
    lr: float = 0.05
    momentum: float = 0.9
    tau_contrastive: float = 0.1
    tau_kd: float = 0.1
    kd_weight: float = 1.0
    memory_size: int = 10
    negatives_per_batch: int = 128
    d_h: int = 16
    d_z: Optional[int] = None
    seed: int = 0
    ablate_kd: bool = False
    ablate_cr: bool = False
    kmeans_max_iters: int = 100

    def __post_init__(self):
        if self.d_z is None:
            self.d_z = max(1, self.d_h // 2)
        self.validate()

    def validate(self) -> None:
        for name in ("batch_size", "memory_size", "negatives_per_batch", "d_h", "d_z",
                     "kmeans_max_iters"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("epochs_init", "epochs_replay"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not (self.tau_contrastive > 0 and self.tau_kd > 0):
            raise ValueError("temperatures must be positive")
        if not self.lr >= 0:
            raise ValueError("lr must be >= 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")

    def as_dict(self) -> Dict:
        return asdict(self)


@dataclass
class AccuracyMatrix:
    """``per_task[k, j]`` is accuracy on task j's test set after learning task k
    (NaN for j > k); ``overall[k]`` is accuracy on all observed relations."""

    per_task: np.ndarray
    overall: np.ndarray
    excluded: int = 0

    @classmethod
    def empty(cls, K: int) -> "AccuracyMatrix":
        return cls(np.full((K, K), np.nan), np.full(K, np.nan))

    @property
    def K(self) -> int:
        return self.overall.shape[0]

    def to_csv(self) -> str:
        K = self.K
        lines = [",".join(["after_task", "acc_overall"] + [f"acc_T{j + 1}" for j in range(K)])]
        for k in range(K):
            if np.isnan(self.overall[k]):
                continue
            cells = [str(k + 1), f"{self.overall[k]:.6f}"]
            cells += ["" if np.isnan(v) else f"{v:.6f}" for v in self.per_task[k]]
            lines.append(",".join(cells))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_csv(cls, text: str) -> "AccuracyMatrix":
        rows = [ln.split(",") for ln in text.strip().splitlines()]
        K = len(rows[0]) - 2
        mat = cls.empty(K)
        for cells in rows[1:]:
            k = int(cells[0]) - 1
            mat.overall[k] = float(cells[1])
            mat.per_task[k] = [float(c) if c else np.nan for c in cells[2:]]
        return mat


class ContinualLearner:
    """Mutable run state: encoder, optimizer, episodic memory and rng.

    ``events`` records phase transitions (``"train"``, ``"memorize"``,
    ``"capture"``, ``"replay"``, ``"evaluate"``) with the task number; when
    ``trace`` is on, ``replay_batches`` collects the example ids of every
    replay batch.
    """

    def __init__(self, config: TrainConfig, trace: bool = False):
        self.config = config
        self.params = EncoderParams.init(config.d_h, config.d_z, seed=config.seed)
        self.optimizer = MomentumSGD(self.params, lr=config.lr or 1.0, momentum=config.momentum)
        self.frozen = config.lr == 0
        self.memory = EpisodicMemory()
        self.rng = np.random.default_rng(config.seed)
        self.task_index = 0
        self.events: List[tuple] = []
        self.trace = trace
        self.replay_batches: List[np.ndarray] = []
        self.loss_history: Dict[str, List[float]] = {"init": [], "replay": []}
        self.knowledge_classes: List[int] = []
        self.p_ref: Optional[np.ndarray] = None

    # -- helpers ---------------------------------------------------------

    def _step(self, emb, grad_unit) -> None:
        if self.frozen:
            return
        grads = backward(emb, self.params, grad_unit)
        self.optimizer.step(self.params, grads)

    def _batches(self, n: int):
        order = self.rng.permutation(n)
        bs = self.config.batch_size
        for start in range(0, n, bs):
            yield np.sort(order[start:start + bs])

    def _kmeans_seed(self, relation) -> int:
        # fixed per relation so re-selection under an unchanged encoder is a no-op
        return int(np.random.SeedSequence([self.config.seed, int(relation)]).generate_state(1)[0])

    def embed(self, features: np.ndarray) -> np.ndarray:
        return embed(features, self.params)

    # -- phases ----------------------------------------------------------

    def train_new_task(self, train: Dataset) -> None:
        """Supervised contrastive training of the encoder on a new task's data."""
        if len(train) == 0:
            raise ValueError("empty task")
        cfg = self.config
        self.events.append(("train", self.task_index))
        X, y = train.features, train.labels
        bank = init_bank(self.params, X, y, train.ids)
        n = len(bank)
        count = min(cfg.negatives_per_batch, n)
        for _ in range(cfg.epochs_init):
            total, seen = 0.0, 0
            for idx in self._batches(n):
                emb = forward(X[idx], self.params)
                pool = sample_indices(n, count, self.rng)
                out = supcon_loss(emb.unit, y[idx], idx, bank, pool, cfg.tau_contrastive)
                self._step(emb, out.grads)
                update_bank(bank, idx, emb.unit)
                total += out.value
                seen += idx.size
            self.loss_history["init"].append(total / seen)

    def memorize(self, train: Dataset, relations: Sequence[int]) -> None:
        """k-means exemplar selection for every relation of the current task."""
        self.events.append(("memorize", self.task_index))
        Z = self.embed(train.features)
        for rel in relations:
            mask = train.labels == rel
            if not mask.any():
                log.warning("relation %s has no training examples; nothing memorized", rel)
                continue
            chosen = select_exemplars(train.ids[mask], Z[mask], self.config.memory_size,
                                      seed=self._kmeans_seed(rel),
                                      max_iters=self.config.kmeans_max_iters)
            feats, _ = train.lookup(chosen)
            self.memory.store(int(rel), chosen, feats)

    def capture_memory_knowledge(self) -> np.ndarray:
        """Row-softmaxed prototype cosine similarities over current memory, frozen."""
        if len(self.memory) == 0:
            raise ValueError("memory is empty")
        self.events.append(("capture", self.task_index))
        _, labels, feats = self.memory.contents()
        Z = self.embed(feats)
        classes = list(self.memory.observed)
        protos = compute_prototypes({c: Z[labels == c] for c in classes})
        self.knowledge_classes = classes
        self.p_ref = softmax_rows(cosine_knowledge(protos), self.config.tau_kd)
        return self.p_ref

    def replay(self, train: Dataset, relations: Sequence[int]) -> None:
        """Contrastive replay plus distillation over episodic memory, then re-selection."""
        cfg = self.config
        if cfg.ablate_cr and cfg.ablate_kd:
            raise ValueError("both replay losses ablated; nothing to optimize")
        self.events.append(("replay", self.task_index))
        ids, labels, feats = self.memory.contents()
        bank = init_bank(self.params, feats, labels, ids, role="replay")
        use_kd = not cfg.ablate_kd and self.p_ref is not None
        for _ in range(cfg.epochs_replay):
            total, seen = 0.0, 0
            for idx in self._batches(len(bank)):
                if self.trace:
                    self.replay_batches.append(ids[idx].copy())
                emb = forward(feats[idx], self.params)
                grad = np.zeros_like(emb.unit)
                if not cfg.ablate_cr:
                    out = replay_con_loss(emb.unit, labels[idx], idx, bank, cfg.tau_contrastive)
                    grad += out.grads
                    total += out.value
                if use_kd:
                    kd = kd_loss(self.p_ref, self.knowledge_classes, emb.unit, idx, bank,
                                 cfg.tau_kd)
                    grad += cfg.kd_weight * kd.grads
                    total += cfg.kd_weight * kd.value
                self._step(emb, grad)
                update_bank(bank, idx, emb.unit)
                seen += idx.size
            self.loss_history["replay"].append(total / seen)
        self.memorize(train, relations)

    def evaluate(self, tests: Sequence[Dataset]):
        """NCM accuracy over each test set, using prototypes of the stored exemplars.

        Returns ``(overall, per_set, excluded)``; test examples whose relation
        was never observed are excluded and counted.
        """
        self.events.append(("evaluate", self.task_index))
        _, labels, feats = self.memory.contents()
        Z = self.embed(feats)
        classes = list(self.memory.observed)
        protos = compute_prototypes({c: Z[labels == c] for c in classes})
        correct_all, total_all, excluded = 0, 0, 0
        per_set = []
        for ds in tests:
            keep = np.isin(ds.labels, classes)
            excluded += int((~keep).sum())
            if not keep.any():
                per_set.append(np.nan)
                continue
            pred = ncm_predict(self.embed(ds.features[keep]), protos)
            correct = int(np.sum(pred == ds.labels[keep]))
            per_set.append(correct / int(keep.sum()))
            correct_all += correct
            total_all += int(keep.sum())
        overall = correct_all / total_all if total_all else np.nan
        return overall, per_set, excluded

    def learn_task(self, task: Task) -> None:
        """One pass of the per-task procedure (without evaluation)."""
        self.task_index += 1
        first = self.task_index == 1
        if not first:
            self.capture_memory_knowledge()
        self.train_new_task(task.train)
        self.memorize(task.train, task.relations)
        if not first:
            self.replay(task.train, task.relations)


def run_sequence(stream: TaskStream, config: TrainConfig, trace: bool = False,
                 stop_after: Optional[int] = None,
                 on_task_end: Optional[Callable[[int, ContinualLearner], None]] = None):
    """Learn every task in order, evaluating on all observed test sets after each.

    Returns ``(AccuracyMatrix, learner)``.
    """
    tasks = list(stream)
    for a in range(len(tasks)):
        for b in range(a):
            if set(tasks[a].relations) & set(tasks[b].relations):
                raise ValueError(f"tasks {b + 1} and {a + 1} share relations")
    K = len(tasks)
    learner = ContinualLearner(config, trace=trace)
    matrix = AccuracyMatrix.empty(K)
    for k, task in enumerate(tasks):
        learner.learn_task(task)
        overall, per_set, excluded = learner.evaluate([t.test for t in tasks[:k + 1]])
        matrix.overall[k] = overall
        matrix.per_task[k, :k + 1] = per_set
        matrix.excluded += excluded
        log.info("task %d/%d: accuracy on observed relations %.4f", k + 1, K, overall)
        if on_task_end is not None:
            on_task_end(k + 1, learner)
        if stop_after is not None and k + 1 >= stop_after:
            break
    return matrix, learner
