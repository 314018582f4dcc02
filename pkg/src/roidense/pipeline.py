"""Desk-scale detection and classification pipeline.

Two separable paths share the synthetic dataset: a classifier path (crop
around the ground-truth box, micro dense network, class probabilities) and a
detector path (dense trunk, per-anchor objectness/box heads on a fixed anchor
grid, and a mask head fed by bilinear roi extraction). Training is plain SGD
with momentum; every reported loss is a ``LossBundle`` whose total is the
exact sum of its parts.

Proposal boxes are treated as constants of each training step: no gradient
flows through the roi coordinates into the box head. The gradient checks
honor the same convention by freezing proposals at the base point.

The whole train-and-evaluate path is a pure function of the dataset bytes and
the train config; batch shuffling, initialization and every other random
choice comes from the library's seeded generator.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import nn
from .densenet import (BatchNorm, Conv, DenseBlock, DenseNetConfig, Layer,
                       MaxPool, Network, Param, ReLU, Sequential,
                       build_densenet, make_transition, micro_config,
                       read_checkpoint, write_checkpoint)
from .errors import (ConfigError, DomainError, ParseError, ShapeError,
                     TrainingError)
from .geometry import Box, box_iou_matrix, clip_box
from .losses import (AnchorPrediction, AnchorTarget, LossBundle, LossConfig,
                     decode_box, detection_loss, detection_loss_grads,
                     encode_box, mask_loss, mask_loss_grad, total_loss)
from .metrics import (ConfusionCounts, ScoredSample, SegEvalCase, auc_roc,
                      confusion_metrics, map_segmentation)
from .rng import RandomSource, derive_seed
from .roi import RoIBox, RoiSpec, roi_align, roi_align_backward
from .synth import MALIGNANT, Dataset, Phantom
from .tensor import Tensor


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size: int = 8
    epochs: int = 20
    seed: int = 0
    iou_pos_threshold: float = 0.5
    iou_neg_threshold: float = 0.3
    top_k: int = 4

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ConfigError(f"learning rate must be >= 0: {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must be in [0, 1): {self.momentum}")
        if min(self.batch_size, self.top_k) < 1 or self.epochs < 0:
            raise ConfigError(f"bad batch/epoch/top_k in {self}")
        if self.iou_neg_threshold >= self.iou_pos_threshold:
            raise ConfigError(
                f"negative threshold {self.iou_neg_threshold} must be below "
                f"positive threshold {self.iou_pos_threshold}")


# ---------------------------------------------------------------------------
# Anchors and target assignment


@dataclass(frozen=True)
class AnchorGrid:
    stride: int
    scales: tuple[float, ...]
    feat_h: int
    feat_w: int
    anchors: tuple[Box, ...]


def build_anchor_grid(image_size: tuple[int, int], stride: int,
                      scales: Sequence[float]) -> AnchorGrid:
    """One square anchor per (cell, scale), centered on the cell center."""
    h, w = image_size
    if stride < 1 or h % stride or w % stride:
        raise ConfigError(
            f"stride {stride} must divide the image extents {(h, w)}")
    if not scales:
        raise ConfigError("at least one anchor scale is required")
    feat_h = h // stride
    feat_w = w // stride
    anchors = []
    for r in range(feat_h):
        cy = r * stride + stride / 2.0
        for c in range(feat_w):
            cx = c * stride + stride / 2.0
            for s in scales:
                half = s / 2.0
                anchors.append(Box(cx - half, cy - half, cx + half, cy + half))
    return AnchorGrid(stride=stride, scales=tuple(float(s) for s in scales),
                      feat_h=feat_h, feat_w=feat_w, anchors=tuple(anchors))


def assign_targets(grid: AnchorGrid, gt_boxes: Sequence[Box],
                   pos_threshold: float = 0.5,
                   neg_threshold: float = 0.3) -> list[AnchorTarget | None]:
    """Label every anchor: positive, negative, or None for the ignore band.

    An anchor is positive when its best IoU reaches the positive threshold, or
    when it is the single best anchor for some ground-truth box with nonzero
    IoU (ties to the lowest anchor index; a later box wins a forced anchor).
    Anchors at or below the negative threshold are negatives; the rest are
    ignored. Positives carry the encoded coordinates of their assigned box.
    """
    anchors = list(grid.anchors)
    if not gt_boxes:
        return [AnchorTarget(p_star=0) for _ in anchors]
    ious = box_iou_matrix(anchors, list(gt_boxes))
    best_iou = ious.max(axis=1)
    assigned = ious.argmax(axis=1)
    labels = np.full(len(anchors), -1, dtype=np.int64)
    labels[best_iou <= neg_threshold] = 0
    labels[best_iou >= pos_threshold] = 1
    for g in range(len(gt_boxes)):
        column = ious[:, g]
        a = int(column.argmax())
        if column[a] > 0.0:
            labels[a] = 1
            assigned[a] = g
    out: list[AnchorTarget | None] = []
    for i, anchor in enumerate(anchors):
        if labels[i] == 1:
            t_star = encode_box(gt_boxes[assigned[i]], anchor)
            out.append(AnchorTarget(p_star=1, t_star=t_star))
        elif labels[i] == 0:
            out.append(AnchorTarget(p_star=0))
        else:
            out.append(None)
    return out


# ---------------------------------------------------------------------------
# The mini detector


@dataclass(frozen=True)
class DetectorConfig:
    image_size: tuple[int, int] = (64, 64)
    in_channels: int = 1
    growth_rate: int = 8
    block_layers: tuple[int, ...] = (2,)
    bottleneck_width: int = 4
    compression: float = 0.5
    anchor_scales: tuple[float, ...] = (10.0, 14.0, 20.0, 28.0)
    roi_size: int = 14
    sampling_ratio: int = 2
    mask_size: int = 14
    mask_channels: int = 16
    max_center_delta: float = 2.0
    max_log_scale_delta: float = 3.0

    def __post_init__(self):
        object.__setattr__(self, "image_size", tuple(self.image_size))
        object.__setattr__(self, "block_layers", tuple(self.block_layers))
        object.__setattr__(self, "anchor_scales",
                           tuple(float(s) for s in self.anchor_scales))
        if min(self.roi_size, self.sampling_ratio, self.mask_size,
               self.mask_channels, self.growth_rate) < 1:
            raise ConfigError(f"detector config fields must be positive: {self}")

    @property
    def stride(self) -> int:
        # stem conv (2x) + stem pool (2x) + one transition pool per block (2x)
        return 4 * (2 ** len(self.block_layers))

    @property
    def feature_channels(self) -> int:
        c = 2 * self.growth_rate
        for layers in self.block_layers:
            c = int(math.floor(self.compression * (c + layers * self.growth_rate)))
        return c


@dataclass(frozen=True)
class Proposal:
    anchor_index: int
    box: Box
    score: float


@dataclass
class DetectionForward:
    """Everything one forward pass produced, kept for the backward pass."""
    features: Tensor
    obj_logits: np.ndarray
    obj_probs: np.ndarray
    deltas: np.ndarray
    proposals: list[list[Proposal]]
    rois: list[RoIBox]
    mask_logits: Tensor
    mask_probs: np.ndarray


class MiniDetector:
    """Dense trunk plus objectness, box and mask heads over a fixed grid."""

    def __init__(self, config: DetectorConfig, seed: int = 0):
        self.config = config
        rng = RandomSource(seed)
        k = config.growth_rate
        stem_c = 2 * k
        trunk: list[Layer] = [
            Conv("stem_conv", config.in_channels, stem_c, kernel=7, stride=2,
                 padding=3, rng=rng),
            BatchNorm("stem_bn", stem_c),
            ReLU("stem_relu"),
            MaxPool("stem_pool", window=3, stride=2, padding=1),
        ]
        channels = stem_c
        for b, layers in enumerate(config.block_layers, start=1):
            trunk.append(DenseBlock(f"block{b}", channels, layers, k,
                                    config.bottleneck_width, rng))
            channels += layers * k
            trunk.append(make_transition(f"trans{b}", channels,
                                         config.compression, rng))
            channels = int(math.floor(config.compression * channels))
        self.trunk = trunk
        n_scales = len(config.anchor_scales)
        self.obj_head = Conv("obj_head", channels, n_scales, kernel=1,
                             stride=1, padding=0, rng=rng)
        self.box_head = Conv("box_head", channels, 4 * n_scales, kernel=1,
                             stride=1, padding=0, rng=rng)
        mc = config.mask_channels
        self.mask_head = Sequential("mask_head", [
            Conv("mask_head.conv1", channels, mc, kernel=3, stride=1,
                 padding=1, rng=rng),
            ReLU("mask_head.relu1"),
            Conv("mask_head.conv2", mc, mc, kernel=3, stride=1, padding=1,
                 rng=rng),
            ReLU("mask_head.relu2"),
            Conv("mask_head.conv3", mc, 1, kernel=1, stride=1, padding=0,
                 rng=rng),
        ])
        if config.mask_size != config.roi_size:
            raise ConfigError(
                f"mask head is fully convolutional on the roi crop, so "
                f"mask_size {config.mask_size} must equal roi_size "
                f"{config.roi_size}")
        self.grid = build_anchor_grid(config.image_size, config.stride,
                                      config.anchor_scales)
        h, w = config.image_size
        if (self.grid.feat_h, self.grid.feat_w) != (h // config.stride,
                                                    w // config.stride):
            raise ConfigError("anchor grid does not match the trunk stride")

    # -- bookkeeping -------------------------------------------------------

    def _layers(self) -> list[Layer]:
        return [*self.trunk, self.obj_head, self.box_head, self.mask_head]

    def parameters(self) -> list[Param]:
        return [p for layer in self._layers() for p in layer.parameters()]

    def zero_grads(self) -> None:
        for p in self.parameters():
            p.grad[...] = 0.0

    def state(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for layer in self._layers():
            out.extend((p.name, p.value) for p in layer.parameters())
            out.extend(layer.buffers())
        return out

    def load_state(self, arrays: Sequence[np.ndarray]) -> None:
        arrays = list(arrays)
        if len(arrays) != len(self.state()):
            raise ShapeError(f"checkpoint holds {len(arrays)} arrays, "
                             f"detector has {len(self.state())}")
        for layer in self._layers():
            params = layer.parameters()
            nb = len(layer.buffers())
            take = len(params) + nb
            chunk, arrays = arrays[:take], arrays[take:]
            for p, arr in zip(params, chunk[:len(params)]):
                p.value[...] = arr.reshape(p.value.shape)
            layer.load_buffers(chunk[len(params):])

    # -- forward -----------------------------------------------------------

    def _flatten_obj(self, raw: np.ndarray) -> np.ndarray:
        # (N, S, fh, fw) -> (N, A) in (row, col, scale) anchor order
        return raw.transpose(0, 2, 3, 1).reshape(raw.shape[0], -1)

    def _unflatten_obj(self, flat: np.ndarray) -> np.ndarray:
        n = flat.shape[0]
        s = len(self.config.anchor_scales)
        return (flat.reshape(n, self.grid.feat_h, self.grid.feat_w, s)
                .transpose(0, 3, 1, 2))

    def _flatten_box(self, raw: np.ndarray) -> np.ndarray:
        n, _, fh, fw = raw.shape
        s = len(self.config.anchor_scales)
        return (raw.reshape(n, s, 4, fh, fw).transpose(0, 3, 4, 1, 2)
                .reshape(n, -1, 4))

    def _unflatten_box(self, flat: np.ndarray) -> np.ndarray:
        n = flat.shape[0]
        s = len(self.config.anchor_scales)
        return (flat.reshape(n, self.grid.feat_h, self.grid.feat_w, s, 4)
                .transpose(0, 3, 4, 1, 2)
                .reshape(n, 4 * s, self.grid.feat_h, self.grid.feat_w))

    def forward(self, images: Tensor, mode: str = "infer", top_k: int = 4,
                frozen_proposals: list[list[Proposal]] | None = None
                ) -> DetectionForward:
        """Trunk, per-anchor heads, proposal selection, and mask prediction.

        With ``frozen_proposals`` the roi path reuses the given proposals
        instead of re-selecting the top scorers; the gradient checks rely on
        this to keep the loss differentiable in the parameters.
        """
        h, w = self.config.image_size
        if (images.shape.h, images.shape.w) != (h, w):
            raise ShapeError(f"detector expects {h}x{w} images, got "
                             f"{images.shape.h}x{images.shape.w}")
        feats = images
        for layer in self.trunk:
            feats = layer.forward(feats, mode)
        obj_logits = self._flatten_obj(self.obj_head.forward(feats, mode).data)
        obj_probs = nn.sigmoid(Tensor(obj_logits[:, :, None, None])).data[:, :, 0, 0]
        deltas = self._flatten_box(self.box_head.forward(feats, mode).data)

        n = images.shape.n
        if frozen_proposals is None:
            # untrained box deltas can decode into degenerate slivers, so the
            # proposal path clamps them to a sane range before decoding
            lim = np.array([self.config.max_center_delta,
                            self.config.max_center_delta,
                            self.config.max_log_scale_delta,
                            self.config.max_log_scale_delta])
            proposals = []
            for i in range(n):
                order = np.argsort(-obj_probs[i], kind="stable")[:top_k]
                per_image = []
                for a in order:
                    t = np.clip(deltas[i, a], -lim, lim)
                    box = decode_box(t, self.grid.anchors[a])
                    per_image.append(Proposal(anchor_index=int(a),
                                              box=clip_box(box, w, h),
                                              score=float(obj_probs[i, a])))
                proposals.append(per_image)
        else:
            proposals = frozen_proposals

        stride = self.config.stride
        rois = [RoIBox(batch_index=i, x1=p.box.x1 / stride,
                       y1=p.box.y1 / stride, x2=p.box.x2 / stride,
                       y2=p.box.y2 / stride)
                for i, per_image in enumerate(proposals) for p in per_image]
        spec = RoiSpec(self.config.roi_size, self.config.roi_size,
                       self.config.sampling_ratio)
        crops = roi_align(feats, rois, spec)
        mask_logits = self.mask_head.forward(crops, mode)
        mask_probs = nn.sigmoid(mask_logits).data[:, 0]
        return DetectionForward(features=feats, obj_logits=obj_logits,
                                obj_probs=obj_probs, deltas=deltas,
                                proposals=proposals, rois=rois,
                                mask_logits=mask_logits, mask_probs=mask_probs)

    # -- backward ----------------------------------------------------------

    def backward(self, fwd: DetectionForward, grad_obj_logits: np.ndarray,
                 grad_deltas: np.ndarray, grad_mask_logits: Tensor) -> None:
        """Accumulate parameter gradients from the three head gradients."""
        grad_crops = self.mask_head.backward(grad_mask_logits)
        spec = RoiSpec(self.config.roi_size, self.config.roi_size,
                       self.config.sampling_ratio)
        grad_feats = roi_align_backward(fwd.features, fwd.rois, spec,
                                        grad_crops).data
        grad_feats = grad_feats + self.obj_head.backward(
            Tensor(self._unflatten_obj(grad_obj_logits))).data
        grad_feats = grad_feats + self.box_head.backward(
            Tensor(self._unflatten_box(grad_deltas))).data
        grad = Tensor(grad_feats)
        for layer in reversed(self.trunk):
            grad = layer.backward(grad)


# ---------------------------------------------------------------------------
# Case records and mask targets


@dataclass
class CaseRecord:
    """One phantom prepared for detector training: boxes, masks, targets."""
    image: Tensor
    label: int
    gt_boxes: list[Box]
    gt_masks: list[np.ndarray]
    targets: list[AnchorTarget | None]
    seed_id: int


def prepare_cases(phantoms: Sequence[Phantom], grid: AnchorGrid,
                  cfg: TrainConfig) -> list[CaseRecord]:
    out = []
    for ph in phantoms:
        boxes = [l.box for l in ph.lesions]
        out.append(CaseRecord(
            image=ph.image,
            label=1 if ph.lesions and ph.label == MALIGNANT else 0,
            gt_boxes=boxes,
            gt_masks=[l.mask for l in ph.lesions],
            targets=assign_targets(grid, boxes, cfg.iou_pos_threshold,
                                   cfg.iou_neg_threshold),
            seed_id=ph.seed_id))
    return out


@dataclass
class ClassifierCase:
    """One phantom prepared for the classifier: crop anchor box and label."""
    image: Tensor
    label: int
    box: Box
    seed_id: int


def classifier_cases(phantoms: Sequence[Phantom]) -> list[ClassifierCase]:
    out = []
    for ph in phantoms:
        if not ph.lesions:
            raise DomainError(
                f"phantom {ph.seed_id} has no lesions, so no class label")
        out.append(ClassifierCase(
            image=ph.image,
            label=1 if ph.label == MALIGNANT else 0,
            box=ph.lesions[0].box,
            seed_id=ph.seed_id))
    return out


def sample_mask_in_box(mask: np.ndarray, box: Box, size: int) -> np.ndarray:
    """Nearest-neighbor sample of a binary mask on a size x size grid over box."""
    h, w = mask.shape
    bh = max(box.height, 1e-9)
    bw = max(box.width, 1e-9)
    ys = box.y1 + (np.arange(size) + 0.5) / size * bh
    xs = box.x1 + (np.arange(size) + 0.5) / size * bw
    ri = np.clip(np.rint(ys).astype(int), 0, h - 1)
    ci = np.clip(np.rint(xs).astype(int), 0, w - 1)
    return mask[ri[:, None], ci[None, :]].astype(np.float64)


def mask_targets_for_proposals(proposals: Sequence[Sequence[Proposal]],
                               cases: Sequence[CaseRecord],
                               size: int) -> np.ndarray:
    """(R, size, size) targets: best-overlap lesion mask sampled over each box.

    A proposal with no overlapping lesion gets an all-background target.
    """
    targets = []
    for case, per_image in zip(cases, proposals):
        for prop in per_image:
            if case.gt_boxes:
                ious = box_iou_matrix([prop.box], case.gt_boxes)[0]
                best = int(ious.argmax())
                if ious[best] > 0.0:
                    targets.append(sample_mask_in_box(case.gt_masks[best],
                                                      prop.box, size))
                    continue
            targets.append(np.zeros((size, size)))
    return np.asarray(targets)


def paste_mask_to_image(mask_probs: np.ndarray, box: Box,
                        image_hw: tuple[int, int],
                        threshold: float = 0.5) -> np.ndarray:
    """Nearest-neighbor paste of a thresholded roi-frame mask into the image.

    Every image pixel inside the box reads the mask cell its center falls in,
    so a cellwise-larger mask always pastes to a pixelwise-larger region.
    """
    h, w = image_hw
    out = np.zeros((h, w), dtype=bool)
    m = mask_probs.shape[0]
    r0 = max(0, int(math.ceil(box.y1)))
    r1 = min(h - 1, int(math.floor(box.y2)))
    c0 = max(0, int(math.ceil(box.x1)))
    c1 = min(w - 1, int(math.floor(box.x2)))
    if r1 < r0 or c1 < c0:
        return out
    bh = max(box.height, 1e-9)
    bw = max(box.width, 1e-9)
    rows = np.arange(r0, r1 + 1)
    cols = np.arange(c0, c1 + 1)
    cell_r = np.clip(((rows - box.y1) / bh * m).astype(int), 0, m - 1)
    cell_c = np.clip(((cols - box.x1) / bw * m).astype(int), 0, m - 1)
    out[rows[:, None], cols[None, :]] = \
        mask_probs[cell_r[:, None], cell_c[None, :]] > threshold
    return out


# ---------------------------------------------------------------------------
# Losses over a batch


@dataclass
class _DetectionAux:
    preds: list[AnchorPrediction]
    tgts: list[AnchorTarget]
    where: list[tuple[int, int]]
    mask_targets: np.ndarray


def forward_detect(det: MiniDetector, images: Tensor, mode: str = "infer",
                   top_k: int = 4,
                   frozen_proposals: list[list[Proposal]] | None = None
                   ) -> DetectionForward:
    return det.forward(images, mode, top_k=top_k,
                       frozen_proposals=frozen_proposals)


def detector_loss(det: MiniDetector, cases: Sequence[CaseRecord],
                  cfg: TrainConfig, loss_cfg: LossConfig, mode: str = "train",
                  frozen_proposals: list[list[Proposal]] | None = None
                  ) -> tuple[LossBundle, DetectionForward, _DetectionAux]:
    images = Tensor(np.concatenate([c.image.data for c in cases], axis=0))
    fwd = det.forward(images, mode, top_k=cfg.top_k,
                      frozen_proposals=frozen_proposals)
    preds: list[AnchorPrediction] = []
    tgts: list[AnchorTarget] = []
    where: list[tuple[int, int]] = []
    for i, case in enumerate(cases):
        for a, tgt in enumerate(case.targets):
            if tgt is None:
                continue
            preds.append(AnchorPrediction(p=float(fwd.obj_probs[i, a]),
                                          t=fwd.deltas[i, a]))
            tgts.append(tgt)
            where.append((i, a))
    class_loss, box_loss = detection_loss(preds, tgts, loss_cfg)
    mask_targets = mask_targets_for_proposals(fwd.proposals, cases,
                                              det.config.mask_size)
    n_props = len(fwd.rois)
    mask_term = 0.0
    for r in range(n_props):
        mask_term += mask_loss(fwd.mask_probs[r], mask_targets[r], loss_cfg)
    mask_term = mask_term / n_props if n_props else 0.0
    bundle = total_loss(class_loss, box_loss, mask_term)
    return bundle, fwd, _DetectionAux(preds=preds, tgts=tgts, where=where,
                                      mask_targets=mask_targets)


def detector_backward(det: MiniDetector, fwd: DetectionForward,
                      aux: _DetectionAux, loss_cfg: LossConfig) -> None:
    grad_p, grad_t = detection_loss_grads(aux.preds, aux.tgts, loss_cfg)
    n, a_count = fwd.obj_probs.shape
    grad_obj = np.zeros((n, a_count))
    grad_deltas = np.zeros((n, a_count, 4))
    for (i, a), gp, gt in zip(aux.where, grad_p, grad_t):
        p = fwd.obj_probs[i, a]
        grad_obj[i, a] = gp * p * (1.0 - p)
        grad_deltas[i, a] = gt
    n_props = len(fwd.rois)
    grad_mask = np.zeros_like(fwd.mask_probs)
    for r in range(n_props):
        g = mask_loss_grad(fwd.mask_probs[r], aux.mask_targets[r], loss_cfg)
        s = fwd.mask_probs[r]
        grad_mask[r] = (g / n_props) * s * (1.0 - s)
    det.backward(fwd, grad_obj, grad_deltas, Tensor(grad_mask[:, None]))


# ---------------------------------------------------------------------------
# Optimizer and training loops


class SGD:
    """Momentum SGD over a fixed parameter list; velocities start at zero."""

    def __init__(self, params: Sequence[Param], learning_rate: float,
                 momentum: float):
        self.params = list(params)
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.value) for p in self.params]

    def step(self) -> None:
        for p, v in zip(self.params, self.velocity):
            v *= self.momentum
            v -= self.learning_rate * p.grad
            p.value += v

    def zero_grads(self) -> None:
        for p in self.params:
            p.grad[...] = 0.0


@dataclass
class DetectorTrainState:
    detector: MiniDetector
    optimizer: SGD
    loss_cfg: LossConfig


def train_step(state: DetectorTrainState, batch: Sequence[CaseRecord],
               cfg: TrainConfig, epoch: int = 0,
               batch_index: int = 0) -> LossBundle:
    """One SGD step on one batch; returns the loss bundle for the step."""
    if not batch:
        raise DomainError("train_step needs a non-empty batch")
    state.optimizer.zero_grads()
    bundle, fwd, aux = detector_loss(state.detector, batch, cfg,
                                     state.loss_cfg, mode="train")
    if not math.isfinite(bundle.total):
        raise TrainingError("non-finite detector loss", epoch, batch_index,
                            {"total": bundle.total,
                             "class": bundle.class_loss,
                             "box": bundle.box_loss,
                             "mask": bundle.mask_loss})
    detector_backward(state.detector, fwd, aux, state.loss_cfg)
    state.optimizer.step()
    return bundle


def softmax_cross_entropy(logits: Tensor,
                          labels: np.ndarray) -> tuple[float, Tensor]:
    """Mean negative log-likelihood and its gradient w.r.t. the logits."""
    probs = nn.softmax(logits).data[:, :, 0, 0]
    n = probs.shape[0]
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} for batch of {n}")
    picked = probs[np.arange(n), labels]
    loss = float(-np.log(np.maximum(picked, 1e-300)).mean())
    grad = probs.copy()
    grad[np.arange(n), labels] -= 1.0
    grad /= n
    return loss, Tensor(grad[:, :, None, None])


def crop_for_classification(image: Tensor, box: Box,
                            size: tuple[int, int]) -> Tensor:
    """Fixed-size window centered on the box, clamped to the image bounds."""
    _, _, h, w = image.shape
    ch, cw = size
    if ch > h or cw > w:
        raise ShapeError(f"crop {size} larger than image ({h}, {w})")
    cx, cy = box.center
    top = int(round(cy - ch / 2.0))
    left = int(round(cx - cw / 2.0))
    top = min(max(top, 0), h - ch)
    left = min(max(left, 0), w - cw)
    return Tensor(image.data[:, :, top:top + ch, left:left + cw].copy())


@dataclass
class TrainResult:
    model: object
    log_rows: list[dict]
    best_epoch: int
    best_metrics: dict


@dataclass
class ClassifierReport:
    scores: list[float]
    labels: list[int]
    counts: ConfusionCounts
    values: dict[str, float]
    seed_ids: list[int]


@dataclass
class DetectorReport:
    ratios: list[float]
    seed_ids: list[int]
    map_value: float


def _classifier_inputs(cases: Sequence[ClassifierCase],
                       size: tuple[int, int]) -> Tensor:
    crops = [crop_for_classification(c.image, c.box, size).data for c in cases]
    return Tensor(np.concatenate(crops, axis=0))


def classifier_scores(net: Network, phantoms: Sequence[Phantom],
                      cfg: TrainConfig | None = None
                      ) -> tuple[list[float], list[int], list[int]]:
    """Malignancy scores and labels per case, in split order."""
    if not phantoms:
        raise DomainError("evaluation needs a non-empty split")
    cfg = cfg or TrainConfig()
    cases = classifier_cases(phantoms)
    size = net.config.input_size
    scores: list[float] = []
    labels: list[int] = []
    for start in range(0, len(cases), cfg.batch_size):
        chunk = cases[start:start + cfg.batch_size]
        logits = net.forward(_classifier_inputs(chunk, size), "infer")
        probs = nn.softmax(logits).data[:, 1, 0, 0]
        scores.extend(float(p) for p in probs)
        labels.extend(c.label for c in chunk)
    return scores, labels, [c.seed_id for c in cases]


def evaluate_classifier(net: Network, phantoms: Sequence[Phantom],
                        cfg: TrainConfig | None = None) -> ClassifierReport:
    """Malignancy scores, confusion counts at 0.5, and ranking AUC."""
    scores, labels, seed_ids = classifier_scores(net, phantoms, cfg)
    tp = sum(1 for s, l in zip(scores, labels) if s > 0.5 and l == 1)
    fp = sum(1 for s, l in zip(scores, labels) if s > 0.5 and l == 0)
    tn = sum(1 for s, l in zip(scores, labels) if s <= 0.5 and l == 0)
    fn = sum(1 for s, l in zip(scores, labels) if s <= 0.5 and l == 1)
    counts = ConfusionCounts(tp=tp, fp=fp, tn=tn, fn=fn)
    values = confusion_metrics(counts)
    values["auc"] = auc_roc([ScoredSample(s, l)
                             for s, l in zip(scores, labels)])
    return ClassifierReport(scores=scores, labels=labels, counts=counts,
                            values=values, seed_ids=seed_ids)


def predicted_union_mask(det: MiniDetector, fwd: DetectionForward,
                         image_index: int,
                         mask_threshold: float = 0.5) -> np.ndarray:
    """Union of every proposal's pasted, thresholded mask for one image.

    The mask head decides pixel membership; off-target proposals contribute
    little because their crops predict background.
    """
    per_image = fwd.proposals[image_index]
    h, w = det.config.image_size
    union = np.zeros((h, w), dtype=bool)
    base = sum(len(fwd.proposals[i]) for i in range(image_index))
    for j, prop in enumerate(per_image):
        union |= paste_mask_to_image(fwd.mask_probs[base + j], prop.box,
                                     (h, w), mask_threshold)
    return union


def evaluate_detector(det: MiniDetector, phantoms: Sequence[Phantom],
                      cfg: TrainConfig | None = None) -> DetectorReport:
    """Mean detected fraction of each true lesion region (Eq.-style MAP)."""
    if not phantoms:
        raise DomainError("evaluation needs a non-empty split")
    cfg = cfg or TrainConfig()
    seg_cases = []
    seed_ids = []
    for ph in phantoms:
        fwd = det.forward(ph.image, "infer", top_k=cfg.top_k)
        union = predicted_union_mask(det, fwd, 0)
        seg_cases.append(SegEvalCase(model_mask=union,
                                     truth_mask=ph.truth_mask()))
        seed_ids.append(ph.seed_id)
    ratios = []
    for case in seg_cases:
        truth = int(case.truth_mask.sum())
        ratios.append(int(np.logical_and(case.model_mask,
                                         case.truth_mask).sum()) / truth)
    return DetectorReport(ratios=ratios, seed_ids=seed_ids,
                          map_value=map_segmentation(seg_cases))


def evaluate(model, phantoms: Sequence[Phantom],
             cfg: TrainConfig | None = None):
    """Dispatch on the model kind; see evaluate_classifier/evaluate_detector."""
    if isinstance(model, MiniDetector):
        return evaluate_detector(model, phantoms, cfg)
    if isinstance(model, Network):
        return evaluate_classifier(model, phantoms, cfg)
    raise DomainError(f"cannot evaluate a {type(model).__name__}")


def _snapshot(state_arrays: list[tuple[str, np.ndarray]]) -> list[np.ndarray]:
    return [arr.copy() for _, arr in state_arrays]


def _calibration_subset(count: int, limit: int = 64) -> list[int]:
    """Evenly spaced case indices; fixed representative sample for stats."""
    if count <= limit:
        return list(range(count))
    step = count / limit
    return [int(i * step) for i in range(limit)]


def refresh_batch_stats(layers: Sequence[Layer], x: Tensor) -> None:
    """One frozen-weight pass that rewrites every BN layer's running stats.

    Training updates running statistics as a moving average while the weights
    are themselves moving, so at epoch end they describe a mixture of stale
    networks. Re-estimating them on a representative batch under the final
    weights makes inference-mode outputs match the trained behavior.
    """
    for layer in layers:
        x = layer.forward(x, "calibrate")


def train_classifier(dataset: Dataset, cfg: TrainConfig,
                     net_cfg: DenseNetConfig | None = None) -> TrainResult:
    """Epochs of SGD on class crops; returns the best-validation checkpoint."""
    if not dataset.train or not dataset.validation:
        raise DomainError("dataset needs both a train and a validation split")
    if net_cfg is None:
        net_cfg = micro_config(input_size=dataset.spec.image_size)
    net = build_densenet(net_cfg, seed=cfg.seed)
    cases = classifier_cases(dataset.train)
    labels_all = np.asarray([c.label for c in cases], dtype=np.int64)
    rng = RandomSource(derive_seed(cfg.seed, 7))
    optimizer = SGD(net.parameters(), cfg.learning_rate, cfg.momentum)
    size = net_cfg.input_size

    log_rows: list[dict] = []
    best = None
    best_snapshot = _snapshot(net.state())
    best_epoch = 0
    for epoch in range(1, cfg.epochs + 1):
        order = list(range(len(cases)))
        rng.shuffle(order)
        epoch_loss = 0.0
        steps = 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            chunk = [cases[i] for i in idx]
            optimizer.zero_grads()
            logits = net.forward(_classifier_inputs(chunk, size), "train")
            loss, grad = softmax_cross_entropy(logits, labels_all[idx])
            if not math.isfinite(loss):
                raise TrainingError("non-finite classifier loss", epoch, steps,
                                    {"loss": loss})
            net.backward(grad)
            optimizer.step()
            epoch_loss += loss
            steps += 1
        calib = [cases[i] for i in _calibration_subset(len(cases))]
        refresh_batch_stats(net.layers, _classifier_inputs(calib, size))
        scores, val_labels, _ = classifier_scores(net, dataset.validation, cfg)
        hits = sum(1 for s, l in zip(scores, val_labels)
                   if (s > 0.5) == bool(l))
        row = {"epoch": epoch, "train_loss": epoch_loss / max(steps, 1),
               "val_accuracy": hits / len(val_labels),
               "val_auc": auc_roc([ScoredSample(s, l)
                                   for s, l in zip(scores, val_labels)])}
        log_rows.append(row)
        key = row["val_accuracy"]
        if best is None or key > best:
            best = key
            best_snapshot = _snapshot(net.state())
            best_epoch = epoch
    net.load_state(best_snapshot)
    best_metrics = ({"val_accuracy": log_rows[best_epoch - 1]["val_accuracy"],
                     "val_auc": log_rows[best_epoch - 1]["val_auc"]}
                    if log_rows else {})
    return TrainResult(model=net, log_rows=log_rows, best_epoch=best_epoch,
                       best_metrics=best_metrics)


def train_detector(dataset: Dataset, cfg: TrainConfig,
                   det_cfg: DetectorConfig | None = None,
                   loss_cfg: LossConfig | None = None) -> TrainResult:
    """Epochs of train_step over seeded batches; best checkpoint by MAP."""
    if not dataset.train or not dataset.validation:
        raise DomainError("dataset needs both a train and a validation split")
    if det_cfg is None:
        det_cfg = DetectorConfig(image_size=dataset.spec.image_size)
    if loss_cfg is None:
        loss_cfg = LossConfig(mask_size=det_cfg.mask_size)
    det = MiniDetector(det_cfg, seed=cfg.seed)
    cases = prepare_cases(dataset.train, det.grid, cfg)
    rng = RandomSource(derive_seed(cfg.seed, 11))
    state = DetectorTrainState(detector=det,
                               optimizer=SGD(det.parameters(),
                                             cfg.learning_rate, cfg.momentum),
                               loss_cfg=loss_cfg)
    log_rows: list[dict] = []
    best = None
    best_snapshot = _snapshot(det.state())
    best_epoch = 0
    for epoch in range(1, cfg.epochs + 1):
        order = list(range(len(cases)))
        rng.shuffle(order)
        sums = np.zeros(4)
        steps = 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            bundle = train_step(state, [cases[i] for i in idx], cfg,
                                epoch=epoch, batch_index=steps)
            sums += (bundle.total, bundle.class_loss, bundle.box_loss,
                     bundle.mask_loss)
            steps += 1
        calib = [cases[i] for i in _calibration_subset(len(cases))]
        refresh_batch_stats(det.trunk, Tensor(np.concatenate(
            [c.image.data for c in calib], axis=0)))
        report = evaluate_detector(det, dataset.validation, cfg)
        denom = max(steps, 1)
        row = {"epoch": epoch, "train_loss": float(sums[0] / denom),
               "class_loss": float(sums[1] / denom),
               "box_loss": float(sums[2] / denom),
               "mask_loss": float(sums[3] / denom),
               "val_map": report.map_value}
        log_rows.append(row)
        if best is None or row["val_map"] > best:
            best = row["val_map"]
            best_snapshot = _snapshot(det.state())
            best_epoch = epoch
    det.load_state(best_snapshot)
    best_metrics = ({"val_map": log_rows[best_epoch - 1]["val_map"]}
                    if log_rows else {})
    return TrainResult(model=det, log_rows=log_rows, best_epoch=best_epoch,
                       best_metrics=best_metrics)


# ---------------------------------------------------------------------------
# Detector checkpoints: the classifier format plus a heads section


def save_detector(path, det: MiniDetector) -> None:
    scales = len(det.config.anchor_scales)
    meta = {
        "kind": "detector",
        "config": asdict(det.config),
        "heads": {
            "objectness_channels": scales,
            "box_channels": 4 * scales,
            "mask_channels": det.config.mask_channels,
            "mask_size": det.config.mask_size,
        },
    }
    write_checkpoint(path, meta, [arr for _, arr in det.state()])


def load_detector(path) -> MiniDetector:
    meta, arrays = read_checkpoint(path)
    if meta.get("kind") != "detector":
        raise ParseError(f"checkpoint kind {meta.get('kind')!r} is not a "
                         f"detector")
    cfg = DetectorConfig(**meta["config"])
    det = MiniDetector(cfg, seed=0)
    det.load_state(arrays)
    return det
