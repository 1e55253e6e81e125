"""Linear entity-pair encoder with a two-layer projection head.

All arrays are float64 numpy. Batched operations take row-major inputs of
shape ``(n, dim)``. Gradients are written out by hand; there is no autodiff.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Optional

import numpy as np

PARAM_NAMES = ("W", "b", "W1", "b1", "W2", "b2")


class DegenerateEmbeddingError(ValueError):
    """Raised when a projection output has zero norm and cannot be normalized."""


class NonFiniteGradientError(FloatingPointError):
    pass


@dataclass
class EncoderParams:
    """Trainable parameters.

    ``W``/``b`` map the concatenated entity features (length ``2*d_h``) to the
    hidden representation; ``W1``/``b1`` and ``W2``/``b2`` form the projection
    head ``d_h -> d_h -> d_z`` with a rectifier between them.
    """

    W: np.ndarray
    b: np.ndarray
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray

    @property
    def d_h(self) -> int:
        return self.b.shape[0]

    @property
    def d_z(self) -> int:
        return self.b2.shape[0]

    @classmethod
    def init(cls, d_h: int, d_z: Optional[int] = None, seed=0) -> "EncoderParams":
        """Uniform init in +-1/sqrt(fan_in), seeded."""
        if d_z is None:
            d_z = max(1, d_h // 2)
        rng = np.random.default_rng(seed)

        def layer(fan_out, fan_in):
            bound = 1.0 / np.sqrt(fan_in)
            w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
            bias = rng.uniform(-bound, bound, size=fan_out)
            return w, bias

        W, b = layer(d_h, 2 * d_h)
        W1, b1 = layer(d_h, d_h)
        W2, b2 = layer(d_z, d_h)
        return cls(W, b, W1, b1, W2, b2)

    @classmethod
    def identity_head(cls, W: np.ndarray, b: np.ndarray) -> "EncoderParams":
        """Projection head that passes nonnegative hidden vectors through unchanged."""
        d_h = b.shape[0]
        return cls(np.asarray(W, float), np.asarray(b, float),
                   np.eye(d_h), np.zeros(d_h), np.eye(d_h), np.zeros(d_h))

    def arrays(self) -> Dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def copy(self) -> "EncoderParams":
        return EncoderParams(**{k: v.copy() for k, v in self.arrays().items()})

    def validate(self) -> None:
        d_h, d_z = self.d_h, self.d_z
        expected = {
            "W": (d_h, 2 * d_h), "b": (d_h,),
            "W1": (d_h, d_h), "b1": (d_h,),
            "W2": (d_z, d_h), "b2": (d_z,),
        }
        for name, shape in expected.items():
            arr = getattr(self, name)
            if arr.shape != shape:
                raise ValueError(f"{name} has shape {arr.shape}, expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} has non-finite entries")


@dataclass
class GradientSet:
    W: np.ndarray
    b: np.ndarray
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray

    @classmethod
    def zeros_like(cls, params: EncoderParams) -> "GradientSet":
        return cls(**{k: np.zeros_like(v) for k, v in params.arrays().items()})

    def arrays(self) -> Dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def __add__(self, other: "GradientSet") -> "GradientSet":
        return GradientSet(**{k: v + getattr(other, k) for k, v in self.arrays().items()})


@dataclass
class Embedding:
    """Forward pass result for a batch: hidden ``h``, raw ``z~`` and unit ``z``."""

    hidden: np.ndarray
    raw: np.ndarray
    unit: np.ndarray
    # cached for backward
    features: Optional[np.ndarray] = field(default=None, repr=False)
    pre_act: Optional[np.ndarray] = field(default=None, repr=False)
    act: Optional[np.ndarray] = field(default=None, repr=False)
    norms: Optional[np.ndarray] = field(default=None, repr=False)


def _as_batch(x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        return x[None, :], True
    return x, False


def encode(features: np.ndarray, params: EncoderParams) -> np.ndarray:
    """hidden = W @ features + b; accepts one vector or a batch of rows."""
    x, single = _as_batch(features)
    if x.shape[1] != 2 * params.d_h:
        raise ValueError(f"features have length {x.shape[1]}, expected {2 * params.d_h}")
    h = x @ params.W.T + params.b
    return h[0] if single else h


def project(hidden: np.ndarray, params: EncoderParams) -> Embedding:
    h, single = _as_batch(hidden)
    if h.shape[1] != params.d_h:
        raise ValueError(f"hidden has length {h.shape[1]}, expected {params.d_h}")
    pre = h @ params.W1.T + params.b1
    act = np.maximum(pre, 0.0)
    raw = act @ params.W2.T + params.b2
    norms = np.linalg.norm(raw, axis=1)
    if np.any(norms == 0.0):
        bad = np.flatnonzero(norms == 0.0).tolist()
        raise DegenerateEmbeddingError(f"zero projection vector for rows {bad}")
    unit = raw / norms[:, None]
    if single:
        return Embedding(h[0], raw[0], unit[0], None, pre, act, norms)
    return Embedding(h, raw, unit, None, pre, act, norms)


def forward(features: np.ndarray, params: EncoderParams) -> Embedding:
    """encode + project on a batch, keeping the intermediates backward needs."""
    x, _ = _as_batch(features)
    emb = project(encode(x, params), params)
    if emb.hidden.ndim == 1:
        emb = Embedding(emb.hidden[None], emb.raw[None], emb.unit[None],
                        None, emb.pre_act, emb.act, emb.norms)
    emb.features = x
    return emb


def embed(features: np.ndarray, params: EncoderParams) -> np.ndarray:
    """Unit embeddings for a batch of feature rows."""
    return forward(features, params).unit


def backward(emb: Embedding, params: EncoderParams,
             grad_unit: Optional[np.ndarray] = None,
             grad_hidden: Optional[np.ndarray] = None) -> GradientSet:
    """Chain rule through normalization, projection head and linear map.

    ``emb`` must come from :func:`forward`. Upstream gradients are per-example
    rows; contributions are summed over the batch.
    """
    n = emb.features.shape[0]
    if grad_unit is None:
        grad_unit = np.zeros((n, params.d_z))
    if grad_hidden is None:
        grad_hidden = np.zeros((n, params.d_h))
    grad_unit = np.asarray(grad_unit, float).reshape(n, -1)
    grad_hidden = np.asarray(grad_hidden, float).reshape(n, -1)
    if grad_unit.shape != (n, params.d_z):
        raise ValueError(f"grad_unit shape {grad_unit.shape}, expected {(n, params.d_z)}")
    if grad_hidden.shape != (n, params.d_h):
        raise ValueError(f"grad_hidden shape {grad_hidden.shape}, expected {(n, params.d_h)}")

    z = emb.unit
    # d(raw/|raw|) = (I - z z^T) / |raw|
    radial = np.sum(z * grad_unit, axis=1, keepdims=True)
    d_raw = (grad_unit - z * radial) / emb.norms[:, None]

    dW2 = d_raw.T @ emb.act
    db2 = d_raw.sum(axis=0)
    d_pre = (d_raw @ params.W2) * (emb.pre_act > 0)
    dW1 = d_pre.T @ emb.hidden
    db1 = d_pre.sum(axis=0)
    d_h = grad_hidden + d_pre @ params.W1
    dW = d_h.T @ emb.features
    db = d_h.sum(axis=0)
    return GradientSet(dW, db, dW1, db1, dW2, db2)


class MomentumSGD:
    """velocity <- momentum * velocity + grad; param <- param - lr * velocity."""

    def __init__(self, params: EncoderParams, lr: float = 0.05, momentum: float = 0.9):
        if lr <= 0:
            raise ValueError("lr must be positive")
        if not 0.0 <= momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        self.lr = lr
        self.momentum = momentum
        self.velocity = GradientSet.zeros_like(params)

    def step(self, params: EncoderParams, grads: GradientSet) -> None:
        apply_update(params, grads, self.lr, self.momentum, self.velocity)


def apply_update(params: EncoderParams, grads: GradientSet, lr: float,
                 momentum: float, velocity: GradientSet) -> None:
    """In-place momentum SGD step. Aborts before touching anything on non-finite grads."""
    if lr <= 0:
        raise ValueError("lr must be positive")
    bad = [k for k, g in grads.arrays().items() if not np.all(np.isfinite(g))]
    if bad:
        raise NonFiniteGradientError(f"non-finite gradient in {', '.join(bad)}")
    for name in PARAM_NAMES:
        v = getattr(velocity, name)
        v *= momentum
        v += getattr(grads, name)
        p = getattr(params, name)
        p -= lr * v


def finite_diff_check(loss_fn: Callable[[EncoderParams], float],
                      params: EncoderParams, analytic: GradientSet,
                      eps: float = 1e-5) -> float:
    """Max relative error between ``analytic`` and central differences of ``loss_fn``.

    Relative error per entry is ``|a - c| / max(|a|, |c|, 1e-8)``.
    """
    worst = 0.0
    probe = params.copy()
    for name in PARAM_NAMES:
        arr = getattr(probe, name)
        grad = getattr(analytic, name)
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + eps
            up = loss_fn(probe)
            arr[idx] = orig - eps
            down = loss_fn(probe)
            arr[idx] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise FloatingPointError(f"non-finite loss perturbing {name}{idx}")
            central = (up - down) / (2 * eps)
            a = grad[idx]
            err = abs(a - central) / max(abs(a), abs(central), 1e-8)
            worst = max(worst, err)
    return worst
