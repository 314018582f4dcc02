"""Multi-task detection losses and the anchor box parameterization.

The total loss is the plain sum of a classification term, a box-regression
term, and a mask term, each reported separately in a ``LossBundle`` whose
``total`` is always the computed sum of the three parts.

The classification term is standard binary cross-entropy between the
predicted objectness and the binary anchor label. (A label-only entropy form
of this term sometimes appears in print; that form has zero gradient in the
prediction and cannot train, so the prediction/label cross-entropy is used.)

The box term parameterizes boxes relative to anchors in the usual
center-offset / log-scale form: t = ((cx-cxa)/wa, (cy-cya)/ha, log(w/wa),
log(h/ha)). Only anchors labeled as objects contribute, and each of the four
components passes through the smooth-L1 transfer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DomainError, ShapeError
from .geometry import Box


@dataclass(frozen=True)
class AnchorTarget:
    """Binary object label and, for objects, the encoded target coordinates."""
    p_star: int
    t_star: np.ndarray = field(default_factory=lambda: np.zeros(4))

    def __post_init__(self):
        if self.p_star not in (0, 1):
            raise DomainError(f"p_star must be 0 or 1, got {self.p_star}")
        object.__setattr__(self, "t_star",
                           np.asarray(self.t_star, dtype=np.float64).reshape(4))
        if not np.isfinite(self.t_star).all():
            raise DomainError("t_star must be finite")


@dataclass(frozen=True)
class AnchorPrediction:
    """Predicted objectness probability and parameterized coordinates."""
    p: float
    t: np.ndarray = field(default_factory=lambda: np.zeros(4))

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise DomainError(f"objectness must be in [0, 1], got {self.p}")
        object.__setattr__(self, "t",
                           np.asarray(self.t, dtype=np.float64).reshape(4))


@dataclass(frozen=True)
class LossConfig:
    """Fixed normalizers and sizes; these are configuration, not batch counts."""
    n_cls: int = 256
    n_box: int = 2400
    mask_size: int = 28
    prob_epsilon: float = 1e-7

    def __post_init__(self):
        if min(self.n_cls, self.n_box, self.mask_size) < 1:
            raise DomainError(f"loss config fields must be positive: {self}")
        if not 0.0 < self.prob_epsilon < 0.5:
            raise DomainError(f"prob_epsilon out of range: {self.prob_epsilon}")


@dataclass(frozen=True)
class LossBundle:
    """The three loss components; total is always their computed sum."""
    total: float
    class_loss: float
    box_loss: float
    mask_loss: float


def smooth_l1(x: float) -> float:
    """0.5 x^2 inside |x| < 1, |x| - 0.5 outside; continuous at the switch."""
    if not math.isfinite(x):
        raise DomainError(f"smooth_l1 needs a finite argument, got {x}")
    ax = abs(x)
    if ax < 1.0:
        return 0.5 * x * x
    return ax - 0.5


def smooth_l1_grad(x: float) -> float:
    """Derivative of smooth_l1; clamped to [-1, 1] by construction."""
    if x > 1.0:
        return 1.0
    if x < -1.0:
        return -1.0
    return x


def _clamp_prob(p: float, eps: float) -> float:
    return min(max(p, eps), 1.0 - eps)


def bce(p: float, p_star: int, prob_epsilon: float = 1e-7) -> float:
    """Binary cross-entropy with the probability clamped into [eps, 1-eps]."""
    if not 0.0 <= p <= 1.0:
        raise DomainError(f"probability out of [0, 1]: {p}")
    if p_star not in (0, 1):
        raise DomainError(f"label must be 0 or 1, got {p_star}")
    q = _clamp_prob(p, prob_epsilon)
    return -(p_star * math.log(q) + (1 - p_star) * math.log(1.0 - q))


def bce_grad(p: float, p_star: int, prob_epsilon: float = 1e-7) -> float:
    """d bce / d p; zero where the clamp is active."""
    if p < prob_epsilon or p > 1.0 - prob_epsilon:
        return 0.0
    return -(p_star / p) + (1 - p_star) / (1.0 - p)


def detection_loss(preds: Sequence[AnchorPrediction],
                   targets: Sequence[AnchorTarget],
                   cfg: LossConfig = LossConfig()) -> tuple[float, float]:
    """Classification and box terms over a set of contributing anchors.

    class term: sum of per-anchor BCE divided by n_cls. box term: for anchors
    with p_star = 1 only, smooth-L1 of each of the four components of
    (t - t_star), summed and divided by n_box.
    """
    if len(preds) != len(targets):
        raise ShapeError(
            f"{len(preds)} predictions vs {len(targets)} targets")
    class_sum = 0.0
    box_sum = 0.0
    for pred, tgt in zip(preds, targets):
        class_sum += bce(pred.p, tgt.p_star, cfg.prob_epsilon)
        if tgt.p_star == 1:
            diff = pred.t - tgt.t_star
            box_sum += sum(smooth_l1(float(d)) for d in diff)
    return class_sum / cfg.n_cls, box_sum / cfg.n_box


def detection_loss_grads(preds: Sequence[AnchorPrediction],
                         targets: Sequence[AnchorTarget],
                         cfg: LossConfig = LossConfig()
                         ) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of (class + box) w.r.t. each p and each t; shapes (A,), (A, 4)."""
    if len(preds) != len(targets):
        raise ShapeError(
            f"{len(preds)} predictions vs {len(targets)} targets")
    grad_p = np.zeros(len(preds))
    grad_t = np.zeros((len(preds), 4))
    for i, (pred, tgt) in enumerate(zip(preds, targets)):
        grad_p[i] = bce_grad(pred.p, tgt.p_star, cfg.prob_epsilon) / cfg.n_cls
        if tgt.p_star == 1:
            diff = pred.t - tgt.t_star
            grad_t[i] = [smooth_l1_grad(float(d)) / cfg.n_box for d in diff]
    return grad_p, grad_t


def mask_loss(pred_mask: np.ndarray, target_mask: np.ndarray,
              cfg: LossConfig = LossConfig()) -> float:
    """Per-cell BCE averaged over the full m x m mask."""
    pred = np.asarray(pred_mask, dtype=np.float64)
    target = np.asarray(target_mask, dtype=np.float64)
    if pred.shape != target.shape or pred.ndim != 2 or pred.shape[0] != pred.shape[1]:
        raise ShapeError(
            f"masks must share one square shape, got {pred.shape} and "
            f"{target.shape}")
    if pred.min() < 0.0 or pred.max() > 1.0:
        raise DomainError("predicted mask values must lie in [0, 1]")
    eps = cfg.prob_epsilon
    q = np.clip(pred, eps, 1.0 - eps)
    cells = -(target * np.log(q) + (1.0 - target) * np.log(1.0 - q))
    return float(cells.mean())


def mask_loss_grad(pred_mask: np.ndarray, target_mask: np.ndarray,
                   cfg: LossConfig = LossConfig()) -> np.ndarray:
    """d mask_loss / d pred, zero where the clamp is active."""
    pred = np.asarray(pred_mask, dtype=np.float64)
    target = np.asarray(target_mask, dtype=np.float64)
    eps = cfg.prob_epsilon
    inside = (pred >= eps) & (pred <= 1.0 - eps)
    q = np.clip(pred, eps, 1.0 - eps)
    g = (-(target / q) + (1.0 - target) / (1.0 - q)) / pred.size
    return np.where(inside, g, 0.0)


def mask_loss_for_class(pred_stack: np.ndarray, class_index: int,
                        target_mask: np.ndarray,
                        cfg: LossConfig = LossConfig()) -> float:
    """Score only the mask channel of the ground-truth class."""
    stack = np.asarray(pred_stack, dtype=np.float64)
    if stack.ndim != 3:
        raise ShapeError(f"expected a (classes, m, m) stack, got {stack.shape}")
    if not 0 <= class_index < stack.shape[0]:
        raise DomainError(
            f"class index {class_index} out of range for {stack.shape[0]} classes")
    return mask_loss(stack[class_index], target_mask, cfg)


def total_loss(class_loss: float, box_loss: float, mask_loss_value: float) -> LossBundle:
    """Bundle the three components; total is their exact floating-point sum."""
    parts = (class_loss, box_loss, mask_loss_value)
    for name, v in zip(("class", "box", "mask"), parts):
        if not math.isfinite(v):
            raise DomainError(f"{name} loss is not finite: {v}")
        if v < 0.0:
            raise DomainError(f"{name} loss is negative: {v}")
    return LossBundle(total=class_loss + box_loss + mask_loss_value,
                      class_loss=class_loss, box_loss=box_loss,
                      mask_loss=mask_loss_value)


def _center_size(b: Box) -> tuple[float, float, float, float]:
    return 0.5 * (b.x1 + b.x2), 0.5 * (b.y1 + b.y2), b.x2 - b.x1, b.y2 - b.y1


def encode_box(gt: Box, anchor: Box) -> np.ndarray:
    """Parameterize gt relative to anchor: offsets over anchor size, log scales."""
    cxa, cya, wa, ha = _center_size(anchor)
    cx, cy, w, h = _center_size(gt)
    if wa <= 0 or ha <= 0:
        raise DomainError(f"anchor must have positive extent, got {anchor}")
    if w <= 0 or h <= 0:
        raise DomainError(f"box must have positive extent, got {gt}")
    return np.array([(cx - cxa) / wa, (cy - cya) / ha,
                     math.log(w / wa), math.log(h / ha)])


def decode_box(t: np.ndarray, anchor: Box) -> Box:
    """Inverse of encode_box: decode(encode(b, a), a) == b."""
    t = np.asarray(t, dtype=np.float64).reshape(4)
    cxa, cya, wa, ha = _center_size(anchor)
    if wa <= 0 or ha <= 0:
        raise DomainError(f"anchor must have positive extent, got {anchor}")
    cx = cxa + t[0] * wa
    cy = cya + t[1] * ha
    w = wa * math.exp(t[2])
    h = ha * math.exp(t[3])
    return Box(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
