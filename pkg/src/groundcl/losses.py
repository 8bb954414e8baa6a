"""Training objectives: response/instance triplet losses, multi-positive
contrastive loss, proposal-classification detection loss and their sum."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor

TERMS = ("det", "img", "ins_tri", "ins_cl")


@dataclass
class LossConfig:
    alpha: float = 1.0
    tau: float = 0.1
    enabled: tuple[str, ...] = ("det", "img", "ins_cl")
    weights: dict[str, float] = field(default_factory=lambda: {t: 1.0 for t in TERMS})

    def validate(self) -> None:
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        unknown = set(self.enabled) - set(TERMS)
        if unknown:
            raise ValueError(f"unknown loss terms {sorted(unknown)}")
        if "ins_tri" in self.enabled and "ins_cl" in self.enabled:
            raise ValueError("ins_tri and ins_cl are mutually exclusive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["enabled"] = list(self.enabled)
        return d


def _flat(x: Tensor) -> Tensor:
    return T.reshape(x, (-1,)) if x.data.ndim != 1 else x


def triplet_loss(anchor: Tensor, positive: Tensor, negative: Tensor, alpha: float) -> Tensor:
    """max(d(a, p) - d(a, n) + alpha, 0), batched over leading axes."""
    if not (anchor.shape == positive.shape == negative.shape):
        raise T.ShapeError("triplet_loss", anchor.shape, positive.shape, negative.shape)
    d_pos = T.l2_distance(anchor, positive)
    d_neg = T.l2_distance(anchor, negative)
    return T.relu(T.add(T.sub(d_pos, d_neg), alpha))


def image_triplet_loss(R: Tensor, R_plus: Tensor, R_minus: Tensor, alpha: float = 1.0) -> Tensor:
    """Triplet hinge on whole response maps (each flattened)."""
    if not (R.shape == R_plus.shape == R_minus.shape):
        raise T.ShapeError("image_triplet_loss", R.shape, R_plus.shape, R_minus.shape)
    return triplet_loss(_flat(R), _flat(R_plus), _flat(R_minus), alpha)


def instance_triplet_loss(H: Tensor, H_plus: Tensor, H_minus: Tensor, alpha: float = 1.0) -> Tensor:
    return triplet_loss(H, H_plus, H_minus, alpha)


def contrastive_loss(z: Tensor, z_pos: Tensor, z_neg: Tensor, tau: float = 0.1) -> Tensor:
    """Multi-positive contrastive loss.

    ``z`` is (..., d), ``z_pos`` (..., P, d), ``z_neg`` (..., N, d); all rows
    are expected to be unit-norm. Returns shape ``z.shape[:-1]``. The largest
    logit is subtracted before exponentiating; it cancels exactly, so it is
    treated as a constant.
    """
    if z_pos.shape[-2] < 1 or z_neg.shape[-2] < 1:
        raise ValueError("contrastive_loss needs at least one positive and one negative")
    d = z.shape[-1]
    if z_pos.shape[-1] != d or z_neg.shape[-1] != d:
        raise T.ShapeError("contrastive_loss", z.shape, z_pos.shape, z_neg.shape)
    col = T.reshape(z, z.shape + (1,))
    s_pos = T.scale(T.matmul(z_pos, col), 1.0 / tau)  # (..., P, 1)
    s_neg = T.scale(T.matmul(z_neg, col), 1.0 / tau)
    s_pos = T.reshape(s_pos, s_pos.shape[:-1])
    s_neg = T.reshape(s_neg, s_neg.shape[:-1])
    shift = np.maximum(s_pos.data.max(axis=-1), s_neg.data.max(axis=-1))[..., None]
    e_pos = T.sum(T.exp(T.sub(s_pos, shift)), axis=-1)
    e_neg = T.sum(T.exp(T.sub(s_neg, shift)), axis=-1)
    return T.sub(T.log(T.add(e_pos, e_neg)), T.log(e_pos))


def detection_loss(scores: Tensor, target) -> Tensor:
    """Cross-entropy of softmax(scores) against ``target`` (per leading row)."""
    target = np.asarray(target)
    K = scores.shape[-1]
    if np.any(target < 0) or np.any(target >= K):
        raise IndexError(f"target index out of range for {K} proposals")
    onehot = np.zeros(scores.shape)
    np.put_along_axis(onehot, target.reshape(scores.shape[:-1] + (1,)), 1.0, axis=-1)
    shift = scores.data.max(axis=-1, keepdims=True)
    z = T.sub(scores, shift)
    lse = T.log(T.sum(T.exp(z), axis=-1))
    picked = T.sum(T.mul(z, onehot), axis=-1)
    return T.sub(lse, picked)


def total_loss(parts: dict[str, Tensor], config: LossConfig) -> Tensor:
    """Weighted sum of the enabled, computed terms."""
    total = None
    for name in TERMS:
        if name not in config.enabled or name not in parts:
            continue
        term = parts[name]
        w = config.weights.get(name, 1.0)
        if w != 1.0:
            term = T.scale(term, w)
        total = term if total is None else T.add(total, term)
    if total is None:
        raise ValueError("no enabled loss term was computed")
    return total
