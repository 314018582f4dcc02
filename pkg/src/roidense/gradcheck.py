"""Finite-difference verification of every backward pass.

Each named check builds seeded inputs, computes the analytic gradients, and
compares them against central differences with the max(1, |fd|) relative
metric. ``run_suite`` executes all checks and is what the command-line
``gradcheck`` subcommand and the acceptance tests call.

``break_op`` injects a defect into the named check's analytic gradient before
comparison; it exists so the failure path (nonzero exit, op named) can be
exercised by tests without shipping a broken operation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import losses, nn, pipeline, roi
from .densenet import build_densenet, make_dense_unit, micro_config
from .geometry import Box
from .rng import RandomSource
from .tensor import Tensor, finite_difference_gradient, max_relative_error

DEFAULT_EPS = 1e-4
COMPOSED_TOL = 1e-3
PRIMITIVE_TOL = 1e-4


@dataclass(frozen=True)
class CheckResult:
    name: str
    max_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tolerance


def _rand_tensor(rng: RandomSource, shape: tuple[int, ...],
                 low: float = -1.0, high: float = 1.0) -> Tensor:
    n = int(np.prod(shape))
    return Tensor(rng.uniforms(n, low, high).reshape(shape))


def _tie_free_tensor(rng: RandomSource, shape: tuple[int, ...]) -> Tensor:
    """Shuffled evenly spaced values in [-1, 1]: every pairwise gap is far
    above the finite-difference step, so argmax selections cannot flip."""
    n = int(np.prod(shape))
    values = np.linspace(-1.0, 1.0, n)
    order = list(range(n))
    rng.shuffle(order)
    return Tensor(values[order].reshape(shape))


def _vec_tensor(v: np.ndarray) -> Tensor:
    return Tensor(v.reshape(1, -1, 1, 1))


def _corrupted(arr: np.ndarray, corrupt: bool) -> np.ndarray:
    return arr + 0.05 if corrupt else arr


def _check_conv2d(eps: float, seeds: Sequence[int], corrupt: bool) -> float:
    worst = 0.0
    for seed in seeds:
        rng = RandomSource(seed)
        x = _rand_tensor(rng, (2, 3, 5, 5))
        kernels = _rand_tensor(rng, (4, 3, 3, 3))
        bias = rng.uniforms(4, -0.5, 0.5)
        stride, padding = (1, 1) if seed % 2 == 0 else (2, 0)
        p = nn.ConvParams(kernels, bias, stride=stride, padding=padding)
        out = nn.conv2d(x, p)
        g = _rand_tensor(rng, tuple(out.shape))
        gx, gk, gb = nn.conv2d_backward(x, p, g)

        def loss_x(t: Tensor) -> float:
            return float((g.data * nn.conv2d(t, p).data).sum())

        def loss_k(t: Tensor) -> float:
            pk = nn.ConvParams(t, bias, stride=stride, padding=padding)
            return float((g.data * nn.conv2d(x, pk).data).sum())

        def loss_b(t: Tensor) -> float:
            pb = nn.ConvParams(kernels, t.data.reshape(-1), stride=stride,
                               padding=padding)
            return float((g.data * nn.conv2d(x, pb).data).sum())

        worst = max(
            worst,
            max_relative_error(_corrupted(gx.data, corrupt),
                               finite_difference_gradient(loss_x, x, eps).data),
            max_relative_error(gk.data,
                               finite_difference_gradient(loss_k, kernels, eps).data),
            max_relative_error(gb,
                               finite_difference_gradient(
                                   loss_b, _vec_tensor(bias), eps).data.reshape(-1)))
    return worst


def _check_batch_norm(eps: float, seeds: Sequence[int], corrupt: bool) -> float:
    worst = 0.0
    for seed in seeds:
        rng = RandomSource(seed)
        x = _rand_tensor(rng, (3, 4, 4, 5))
        gamma = rng.uniforms(4, 0.5, 1.5)
        beta = rng.uniforms(4, -0.5, 0.5)
        g = _rand_tensor(rng, tuple(x.shape))

        def params() -> nn.BatchNormParams:
            return nn.BatchNormParams(gamma.copy(), beta.copy())

        gx, gg, gb = nn.batch_norm_backward(x, params(), g)

        def loss_x(t: Tensor) -> float:
            return float((g.data * nn.batch_norm(t, params(), "train").data).sum())

        def loss_gamma(t: Tensor) -> float:
            p = nn.BatchNormParams(t.data.reshape(-1), beta.copy())
            return float((g.data * nn.batch_norm(x, p, "train").data).sum())

        def loss_beta(t: Tensor) -> float:
            p = nn.BatchNormParams(gamma.copy(), t.data.reshape(-1))
            return float((g.data * nn.batch_norm(x, p, "train").data).sum())

        worst = max(
            worst,
            max_relative_error(_corrupted(gx.data, corrupt),
                               finite_difference_gradient(loss_x, x, eps).data),
            max_relative_error(gg, finite_difference_gradient(
                loss_gamma, _vec_tensor(gamma), eps).data.reshape(-1)),
            max_relative_error(gb, finite_difference_gradient(
                loss_beta, _vec_tensor(beta), eps).data.reshape(-1)))
    return worst


def _away_from_kink(rng: RandomSource, shape: tuple[int, ...],
                    margin: float = 1e-3) -> Tensor:
    """Uniform values in [-1, 1] redrawn until none sits within margin of 0."""
    n = int(np.prod(shape))
    while True:
        vals = rng.uniforms(n, -1.0, 1.0)
        if (np.abs(vals) >= margin).all():
            return Tensor(vals.reshape(shape))


def _check_relu(eps: float, seeds: Sequence[int], corrupt: bool) -> float:
    worst = 0.0
    for seed in seeds:
        rng = RandomSource(seed)
        x = _away_from_kink(rng, (2, 3, 4, 4))
        g = _rand_tensor(rng, tuple(x.shape))
        gx = nn.relu_backward(x, g)

        def loss(t: Tensor) -> float:
            return float((g.data * nn.relu(t).data).sum())

        worst = max(worst, max_relative_error(
            _corrupted(gx.data, corrupt),
            finite_difference_gradient(loss, x, eps).data))
    return worst


def _check_sigmoid(eps: float, seeds: Sequence[int], corrupt: bool) -> float:
    worst = 0.0
    for seed in seeds:
        rng = RandomSource(seed)
        x = _rand_tensor(rng, (2, 3, 3, 3), -2.0, 2.0)
        g = _rand_tensor(rng, tuple(x.shape))
        gx = nn.sigmoid_backward(x, g)

        def loss(t: Tensor) -> float:
            return float((g.data * nn.sigmoid(t).data).sum())

        worst = max(worst, max_relative_error(
            _corrupted(gx.data, corrupt),
            finite_difference_gradient(loss, x, eps).data))
    return worst


def _check_max_pool(eps: float, seeds: Sequence[int], corrupt: bool) -> float:
    worst = 0.0
    for seed in seeds:
        rng = RandomSource(seed)
        x = _tie_free_tensor(rng, (2, 2, 7, 7))
        out, argmax = nn.max_pool2d(x, (3, 3), 2)
        g = _rand_tensor(rng, tuple(out.shape))
        gx = nn.max_pool2d_backward(x, (3, 3), 2, argmax, g)

        def loss(t: Tensor) -> float:
            v, _ = nn.max_pool2d(t, (3, 3), 2)
            return float((g.data * v.data).sum())

        worst = max(worst, max_relative_error(
            _corrupted(gx.data, corrupt),
            finite_difference_gradient(loss, x, eps).data))
    return worst


def _check_avg_pool(eps: float, seeds: Sequence[int], corrupt: bool) -> float:
    worst = 0.0
    for seed in seeds:
        rng = RandomSource(seed)
        x = _rand_tensor(rng, (2, 2, 6, 6))
        out = nn.avg_pool2d(x, (2, 2), 2)
        g = _rand_tensor(rng, tuple(out.shape))
        gx = nn.avg_pool2d_backward(x, (2, 2), 2, g)

        def loss(t: Tensor) -> float:
            return float((g.data * nn.avg_pool2d(t, (2, 2), 2).data).sum())

        worst = max(worst, max_relative_error(
            _corrupted(gx.data, corrupt),
            finite_difference_gradient(loss, x, eps).data))
    return worst


def _check_global_avg_pool(eps: float, seeds: Sequence[int],
                           corrupt: bool) -> float:
    worst = 0.0
    for seed in seeds:
        rng = RandomSource(seed)
        x = _rand_tensor(rng, (2, 3, 5, 5))
        g = _rand_tensor(rng, (2, 3, 1, 1))
        gx = nn.global_avg_pool_backward(x, g)

        def loss(t: Tensor) -> float:
            return float((g.data * nn.global_avg_pool(t).data).sum())

        worst = max(worst, max_relative_error(
            _corrupted(gx.data, corrupt),
            finite_difference_gradient(loss, x, eps).data))
    return worst


def _check_linear(eps: float, seeds: Sequence[int], corrupt: bool) -> float:
    worst = 0.0
    for seed in seeds:
        rng = RandomSource(seed)
        x = _rand_tensor(rng, (3, 6, 1, 1))
        weight = rng.uniforms(4 * 6, -1.0, 1.0).reshape(4, 6)
        bias = rng.uniforms(4, -0.5, 0.5)
        p = nn.LinearParams(weight, bias)
        g = _rand_tensor(rng, (3, 4, 1, 1))
        gx, gw, gb = nn.linear_backward(x, p, g)

        def loss_x(t: Tensor) -> float:
            return float((g.data * nn.linear(t, p).data).sum())

        def loss_w(t: Tensor) -> float:
            pw = nn.LinearParams(t.data.reshape(4, 6), bias)
            return float((g.data * nn.linear(x, pw).data).sum())

        def loss_b(t: Tensor) -> float:
            pb = nn.LinearParams(weight, t.data.reshape(-1))
            return float((g.data * nn.linear(x, pb).data).sum())

        worst = max(
            worst,
            max_relative_error(_corrupted(gx.data, corrupt),
                               finite_difference_gradient(loss_x, x, eps).data),
            max_relative_error(gw.reshape(-1), finite_difference_gradient(
                loss_w, Tensor(weight.reshape(1, 1, 4, 6)), eps).data.reshape(-1)),
            max_relative_error(gb, finite_difference_gradient(
                loss_b, _vec_tensor(bias), eps).data.reshape(-1)))
    return worst


def _check_softmax(eps: float, seeds: Sequence[int], corrupt: bool) -> float:
    worst = 0.0
    for seed in seeds:
        rng = RandomSource(seed)
        x = _rand_tensor(rng, (3, 5, 1, 1), -2.0, 2.0)
        g = _rand_tensor(rng, tuple(x.shape))
        gx = nn.softmax_backward(x, g)

        def loss(t: Tensor) -> float:
            return float((g.data * nn.softmax(t).data).sum())

        worst = max(worst, max_relative_error(
            _corrupted(gx.data, corrupt),
            finite_difference_gradient(loss, x, eps).data))
    return worst


def _seeded_rois(rng: RandomSource, n_batch: int, h: int, w: int,
                 count: int) -> list[roi.RoIBox]:
    rois = []
    for _ in range(count):
        x1 = rng.uniform(0.0, w - 2.0)
        y1 = rng.uniform(0.0, h - 2.0)
        rois.append(roi.RoIBox(
            batch_index=rng.randint(n_batch),
            x1=x1, y1=y1,
            x2=x1 + rng.uniform(0.5, w - 1.0 - x1),
            y2=y1 + rng.uniform(0.5, h - 1.0 - y1)))
    return rois


def _check_roi_align(eps: float, seeds: Sequence[int], corrupt: bool) -> float:
    spec = roi.RoiSpec(3, 3, 2)
    worst = 0.0
    for seed in seeds:
        rng = RandomSource(seed)
        feats = _rand_tensor(rng, (2, 3, 8, 8))
        rois = _seeded_rois(rng, 2, 8, 8, 4)
        out = roi.roi_align(feats, rois, spec)
        g = _rand_tensor(rng, tuple(out.shape))
        gx = roi.roi_align_backward(feats, rois, spec, g)

        def loss(t: Tensor) -> float:
            return float((g.data * roi.roi_align(t, rois, spec).data).sum())

        worst = max(worst, max_relative_error(
            _corrupted(gx.data, corrupt),
            finite_difference_gradient(loss, feats, eps).data))
    return worst


def _check_roi_pool(eps: float, seeds: Sequence[int], corrupt: bool) -> float:
    spec = roi.RoiSpec(2, 2)
    worst = 0.0
    for seed in seeds:
        rng = RandomSource(seed)
        feats = _tie_free_tensor(rng, (2, 3, 8, 8))
        rois = _seeded_rois(rng, 2, 8, 8, 4)
        out, argmax = roi.roi_pool(feats, rois, spec)
        g = _rand_tensor(rng, tuple(out.shape))
        gx = roi.roi_pool_backward(feats, rois, spec, argmax, g)

        def loss(t: Tensor) -> float:
            v, _ = roi.roi_pool(t, rois, spec)
            return float((g.data * v.data).sum())

        worst = max(worst, max_relative_error(
            _corrupted(gx.data, corrupt),
            finite_difference_gradient(loss, feats, eps).data))
    return worst


def _check_bce(eps: float, seeds: Sequence[int], corrupt: bool) -> float:
    worst = 0.0
    for seed in seeds:
        rng = RandomSource(seed)
        p = rng.uniform(0.1, 0.9)
        label = rng.randint(2)
        analytic = losses.bce_grad(p, label)
        fd = (losses.bce(p + eps, label) - losses.bce(p - eps, label)) / (2 * eps)
        analytic = analytic + 0.05 if corrupt else analytic
        worst = max(worst, abs(analytic - fd) / max(1.0, abs(fd)))
    return worst


def _check_smooth_l1(eps: float, seeds: Sequence[int], corrupt: bool) -> float:
    worst = 0.0
    for seed in seeds:
        rng = RandomSource(seed)
        for x in (rng.uniform(-0.9, 0.9), rng.uniform(1.1, 3.0),
                  rng.uniform(-3.0, -1.1)):
            analytic = losses.smooth_l1_grad(x)
            fd = (losses.smooth_l1(x + eps) - losses.smooth_l1(x - eps)) / (2 * eps)
            analytic = analytic + 0.05 if corrupt else analytic
            worst = max(worst, abs(analytic - fd) / max(1.0, abs(fd)))
    return worst


def _check_detection_loss(eps: float, seeds: Sequence[int],
                          corrupt: bool) -> float:
    cfg = losses.LossConfig(n_cls=16, n_box=32)
    worst = 0.0
    for seed in seeds:
        rng = RandomSource(seed)
        count = 6
        p = rng.uniforms(count, 0.1, 0.9)
        t = rng.uniforms(count * 4, -0.8, 0.8).reshape(count, 4)
        labels = [rng.randint(2) for _ in range(count)]
        tstars = rng.uniforms(count * 4, -0.8, 0.8).reshape(count, 4)
        tgts = [losses.AnchorTarget(p_star=l, t_star=ts)
                for l, ts in zip(labels, tstars)]

        def bundle(pv: np.ndarray, tv: np.ndarray) -> float:
            preds = [losses.AnchorPrediction(p=float(a), t=b)
                     for a, b in zip(pv, tv)]
            c, b = losses.detection_loss(preds, tgts, cfg)
            return c + b

        gp, gt = losses.detection_loss_grads(
            [losses.AnchorPrediction(p=float(a), t=b) for a, b in zip(p, t)],
            tgts, cfg)

        def loss_p(x: Tensor) -> float:
            return bundle(x.data.reshape(-1), t)

        def loss_t(x: Tensor) -> float:
            return bundle(p, x.data.reshape(count, 4))

        worst = max(
            worst,
            max_relative_error(_corrupted(gp, corrupt),
                               finite_difference_gradient(
                                   loss_p, _vec_tensor(p), eps).data.reshape(-1)),
            max_relative_error(gt.reshape(-1), finite_difference_gradient(
                loss_t, Tensor(t.reshape(1, 1, count, 4)), eps).data.reshape(-1)))
    return worst


def _check_mask_loss(eps: float, seeds: Sequence[int], corrupt: bool) -> float:
    cfg = losses.LossConfig()
    worst = 0.0
    for seed in seeds:
        rng = RandomSource(seed)
        m = 4
        pred = rng.uniforms(m * m, 0.1, 0.9).reshape(m, m)
        target = (rng.uniforms(m * m) > 0.5).astype(float).reshape(m, m)
        analytic = losses.mask_loss_grad(pred, target, cfg)

        def loss(t: Tensor) -> float:
            return losses.mask_loss(t.data.reshape(m, m), target, cfg)

        worst = max(worst, max_relative_error(
            _corrupted(analytic.reshape(-1), corrupt),
            finite_difference_gradient(
                loss, Tensor(pred.reshape(1, 1, m, m)), eps).data.reshape(-1)))
    return worst


def _check_dense_unit(eps: float, seeds: Sequence[int], corrupt: bool) -> float:
    worst = 0.0
    for seed in seeds:
        rng = RandomSource(seed)
        unit = make_dense_unit("unit", in_channels=6, growth_rate=4,
                               bottleneck_width=2, rng=rng)
        x = _rand_tensor(rng, (2, 6, 6, 6))
        out = unit.forward(x, "train")
        g = _rand_tensor(rng, tuple(out.shape))
        gx = unit.backward(g)

        def loss(t: Tensor) -> float:
            return float((g.data * unit.forward(t, "train").data).sum())

        worst = max(worst, max_relative_error(
            _corrupted(gx.data, corrupt),
            finite_difference_gradient(loss, x, eps).data))
    return worst


def _entry_fd(loss: Callable[[], float], arr: np.ndarray, flat_index: int,
              eps: float) -> float:
    flat = arr.reshape(-1)
    orig = flat[flat_index]
    flat[flat_index] = orig + eps
    hi = loss()
    flat[flat_index] = orig - eps
    lo = loss()
    flat[flat_index] = orig
    return (hi - lo) / (2.0 * eps)


def _check_micro_network(eps: float, seeds: Sequence[int],
                         corrupt: bool) -> float:
    """Three random parameter entries per layer on the composed network."""
    worst = 0.0
    for seed in seeds:
        rng = RandomSource(seed)
        cfg = micro_config(input_size=(32, 32))
        net = build_densenet(cfg, seed=seed)
        x = _rand_tensor(rng, (2, 1, 32, 32), 0.0, 1.0)
        labels = np.array([rng.randint(2) for _ in range(2)])

        def loss() -> float:
            logits = net.forward(x, "train")
            return pipeline.softmax_cross_entropy(logits, labels)[0]

        net.zero_grads()
        logits = net.forward(x, "train")
        value, grad = pipeline.softmax_cross_entropy(logits, labels)
        net.backward(grad)

        for p in net.parameters():
            count = min(3, p.value.size)
            for _ in range(count):
                idx = rng.randint(p.value.size)
                analytic = p.grad.reshape(-1)[idx]
                analytic = analytic + 0.05 if corrupt else analytic
                fd = _entry_fd(loss, p.value, idx, eps)
                worst = max(worst, abs(analytic - fd) / max(1.0, abs(fd)))
    return worst


def _detector_case(rng: RandomSource,
                   det_cfg: pipeline.DetectorConfig) -> pipeline.CaseRecord:
    h, w = det_cfg.image_size
    image = _rand_tensor(rng, (1, 1, h, w), 0.0, 1.0)
    cx = rng.uniform(10.0, w - 10.0)
    cy = rng.uniform(10.0, h - 10.0)
    r = rng.uniform(4.0, 7.0)
    box = Box(cx - r, cy - r, cx + r, cy + r)
    jj, ii = np.meshgrid(np.arange(w), np.arange(h))
    mask = ((jj - cx) ** 2 + (ii - cy) ** 2) <= r * r
    cfg = pipeline.TrainConfig()
    return pipeline.CaseRecord(
        image=image, label=1, gt_boxes=[box], gt_masks=[mask],
        targets=pipeline.assign_targets(
            pipeline.build_anchor_grid(det_cfg.image_size, det_cfg.stride,
                                       det_cfg.anchor_scales),
            [box], cfg.iou_pos_threshold, cfg.iou_neg_threshold),
        seed_id=0)


def _check_mini_detector(eps: float, seeds: Sequence[int],
                         corrupt: bool) -> float:
    """Five random parameter entries of the end-to-end detector loss.

    Proposals are frozen at the base point, matching the training rule that no
    gradient flows through roi coordinates.
    """
    det_cfg = pipeline.DetectorConfig(
        image_size=(32, 32), growth_rate=4, block_layers=(1,),
        anchor_scales=(8.0, 14.0), roi_size=7, mask_size=7, mask_channels=4)
    cfg = pipeline.TrainConfig(top_k=2)
    loss_cfg = losses.LossConfig(n_cls=16, n_box=64, mask_size=7)
    worst = 0.0
    for seed in seeds:
        rng = RandomSource(seed)
        det = pipeline.MiniDetector(det_cfg, seed=seed)
        cases = [_detector_case(rng, det_cfg)]
        images = Tensor(cases[0].image.data)
        base = det.forward(images, "train", top_k=cfg.top_k)
        frozen = base.proposals

        def loss() -> float:
            bundle, _, _ = pipeline.detector_loss(det, cases, cfg, loss_cfg,
                                                  mode="train",
                                                  frozen_proposals=frozen)
            return bundle.total

        det.zero_grads()
        bundle, fwd, aux = pipeline.detector_loss(det, cases, cfg, loss_cfg,
                                                  mode="train",
                                                  frozen_proposals=frozen)
        pipeline.detector_backward(det, fwd, aux, loss_cfg)

        params = det.parameters()
        for _ in range(5):
            p = params[rng.randint(len(params))]
            idx = rng.randint(p.value.size)
            analytic = p.grad.reshape(-1)[idx]
            analytic = analytic + 0.05 if corrupt else analytic
            fd = _entry_fd(loss, p.value, idx, eps)
            worst = max(worst, abs(analytic - fd) / max(1.0, abs(fd)))
    return worst


CHECKS: dict[str, tuple[Callable[[float, Sequence[int], bool], float], float]] = {
    "conv2d": (_check_conv2d, PRIMITIVE_TOL),
    "batch_norm": (_check_batch_norm, PRIMITIVE_TOL),
    "relu": (_check_relu, PRIMITIVE_TOL),
    "sigmoid": (_check_sigmoid, PRIMITIVE_TOL),
    "max_pool2d": (_check_max_pool, PRIMITIVE_TOL),
    "avg_pool2d": (_check_avg_pool, PRIMITIVE_TOL),
    "global_avg_pool": (_check_global_avg_pool, PRIMITIVE_TOL),
    "linear": (_check_linear, PRIMITIVE_TOL),
    "softmax": (_check_softmax, PRIMITIVE_TOL),
    "roi_align": (_check_roi_align, PRIMITIVE_TOL),
    "roi_pool": (_check_roi_pool, PRIMITIVE_TOL),
    "bce": (_check_bce, PRIMITIVE_TOL),
    "smooth_l1": (_check_smooth_l1, PRIMITIVE_TOL),
    "detection_loss": (_check_detection_loss, PRIMITIVE_TOL),
    "mask_loss": (_check_mask_loss, PRIMITIVE_TOL),
    "dense_unit": (_check_dense_unit, PRIMITIVE_TOL),
    "micro_network": (_check_micro_network, COMPOSED_TOL),
    "mini_detector": (_check_mini_detector, COMPOSED_TOL),
}


def run_suite(eps: float = DEFAULT_EPS, seeds: Sequence[int] = range(5),
              break_op: str | None = None,
              names: Sequence[str] | None = None) -> list[CheckResult]:
    """Run the named checks (default: all) and report per-op worst errors."""
    selected = list(names) if names else list(CHECKS)
    unknown = [n for n in selected if n not in CHECKS]
    if unknown:
        raise KeyError(f"unknown gradcheck ops: {unknown}")
    results = []
    for name in selected:
        func, tol = CHECKS[name]
        err = func(eps, seeds, break_op == name)
        results.append(CheckResult(name=name, max_error=err, tolerance=tol))
    return results
