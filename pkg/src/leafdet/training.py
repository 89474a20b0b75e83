"""Training machinery: anchor/ROI target assignment, the four losses, Adam,
and the four-step alternating optimization schedule.

The schedule trains (1) a backbone+RPN end to end, (2) a fresh backbone plus
detector head on the step-1 proposals, (3) the RPN-exclusive layers again on
top of the now-shared, frozen backbone, and (4) the head-exclusive layers with
all shared layers frozen.  Proposals are harvested once at the start of steps
2 and 4 and held fixed, so detector optimization never chases a moving target.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .boxes import (Box, anchor_boxes_array, encode_deltas_array, iou_matrix)
from .model import (ModelConfig, ModelWeights, ProposalParams, backbone_forward,
                    default_model_config, detector_forward, init_weights,
                    params_from_weights, propose_regions, roi_pool_batch,
                    rpn_forward, rpn_outputs_as_rows)
from .tensor import Tensor


class NonFiniteGradient(RuntimeError):
    """A parameter gradient contained NaN or infinity; the step was aborted."""


class TrainingDiverged(RuntimeError):
    """Total loss became non-finite; carries the last good weights and log."""

    def __init__(self, weights: ModelWeights, log: list):
        super().__init__("training diverged: total loss is non-finite")
        self.weights = weights
        self.log = log


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters for the full pipeline; defaults follow the reference setup."""

    num_classes: int
    class_names: tuple
    learning_rate: float = 1e-5
    epochs: int = 300                 # per schedule step
    dropout_rate: float = 0.5
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    anchor_scales: tuple = (60.0, 120.0, 240.0)
    anchor_ratios: tuple = (0.5, 1.0, 2.0)
    rpn_batch: int = 256
    pos_iou: float = 0.7
    neg_iou: float = 0.3
    seed: int = 0
    input_size: int = 256
    width_divisor: int = 1
    roi_size: tuple = (7, 7)
    proposals_per_image: int = 64
    fg_fraction: float = 0.25
    roi_fg_iou: float = 0.5
    rpn_train_post_nms: int = 32
    rpn_nms_iou: float = 0.7
    loss_weights: tuple = (1.0, 1.0, 1.0, 1.0)

    def __post_init__(self):
        if self.learning_rate < 0:
            raise T.ParameterError(f"learning rate must be >= 0, got {self.learning_rate}")
        if not self.neg_iou <= self.pos_iou:
            raise T.ParameterError(
                f"neg_iou {self.neg_iou} must not exceed pos_iou {self.pos_iou}")
        if len(self.class_names) != self.num_classes:
            raise T.ParameterError(
                f"{len(self.class_names)} class names for {self.num_classes} classes")

    def model_config(self) -> ModelConfig:
        return default_model_config(
            num_classes=self.num_classes, input_size=self.input_size,
            width_divisor=self.width_divisor, anchor_scales=self.anchor_scales,
            anchor_ratios=self.anchor_ratios, roi_size=self.roi_size,
            dropout_rate=self.dropout_rate)


@dataclass
class AnchorTargets:
    """Per-anchor labels (1 pos, 0 neg, -1 ignore) and regression targets."""

    labels: np.ndarray
    deltas: np.ndarray
    matched_gt: np.ndarray


@dataclass
class RoiTargets:
    """Sampled ROIs with class ids (background = num_classes) and fg deltas."""

    boxes: list
    class_ids: np.ndarray
    deltas: np.ndarray


@dataclass
class TargetAssignment:
    anchors: Optional[AnchorTargets] = None
    rois: Optional[RoiTargets] = None


@dataclass
class LossBreakdown:
    rpn_cls: float = 0.0
    rpn_reg: float = 0.0
    det_cls: float = 0.0
    det_reg: float = 0.0
    total: float = 0.0


# ---------------------------------------------------------------------------
# target assignment
# ---------------------------------------------------------------------------

def label_anchors(anchors: Sequence, gt_boxes: Sequence[Box],
                  pos_iou: float = 0.7, neg_iou: float = 0.3) -> AnchorTargets:
    """Positive at IoU >= pos_iou or as some GT's argmax anchor; negative below
    neg_iou; ignored between.  Positives regress toward their best-IoU GT."""
    if not gt_boxes:
        raise T.ParameterError("label_anchors needs at least one ground-truth box")
    anchor_arr = anchor_boxes_array(anchors)
    gt_arr = np.array([b.as_array() for b in gt_boxes])
    ious = iou_matrix(anchor_arr, gt_arr)              # [A, G]

    best_gt = ious.argmax(axis=1)
    best_iou = ious[np.arange(len(anchors)), best_gt]

    labels = np.full(len(anchors), -1, dtype=np.int8)
    labels[best_iou < neg_iou] = 0
    labels[best_iou >= pos_iou] = 1
    # every GT owns its argmax anchor, whatever the overlap; regression still
    # points each positive at its own best-IoU GT
    owners = ious.argmax(axis=0)
    labels[owners] = 1

    matched = np.where(labels == 1, best_gt, -1)
    deltas = np.zeros((len(anchors), 4), dtype=np.float64)
    pos = np.nonzero(labels == 1)[0]
    if len(pos):
        deltas[pos] = encode_deltas_array(anchor_arr[pos], gt_arr[best_gt[pos]])
    return AnchorTargets(labels=labels, deltas=deltas, matched_gt=matched)


def sample_anchor_batch(targets: AnchorTargets, batch: int,
                        rng: np.random.Generator, pos_fraction: float = 0.5) -> np.ndarray:
    """Up to ``batch`` anchor indices, positives capped at ``pos_fraction``."""
    pos = np.nonzero(targets.labels == 1)[0]
    neg = np.nonzero(targets.labels == 0)[0]
    n_pos = min(len(pos), int(batch * pos_fraction))
    if len(pos) > n_pos:
        pos = rng.choice(pos, size=n_pos, replace=False)
    n_neg = min(len(neg), batch - len(pos))
    if len(neg) > n_neg:
        neg = rng.choice(neg, size=n_neg, replace=False)
    return np.sort(np.concatenate([pos, neg]))


def assign_rois(proposals: Sequence[Box], gt_boxes: Sequence[Box],
                gt_class_ids: Sequence[int], num_classes: int,
                rng: np.random.Generator, fg_iou: float = 0.5,
                max_rois: int = 64, fg_fraction: float = 0.25) -> RoiTargets:
    """Sample detector ROIs from proposals plus the GT boxes themselves.

    A ROI is foreground when its best IoU reaches ``fg_iou``; it then carries
    that GT's class id and encoded deltas.  Everything else is background
    (class id ``num_classes``).
    """
    candidates = list(proposals) + list(gt_boxes)
    cand_arr = np.array([b.as_array() for b in candidates])
    gt_arr = np.array([b.as_array() for b in gt_boxes])
    ious = iou_matrix(cand_arr, gt_arr)
    best_gt = ious.argmax(axis=1)
    best_iou = ious[np.arange(len(candidates)), best_gt]

    fg = np.nonzero(best_iou >= fg_iou)[0]
    bg = np.nonzero(best_iou < fg_iou)[0]
    n_fg = min(len(fg), max(1, int(max_rois * fg_fraction)))
    if len(fg) > n_fg:
        fg = rng.choice(fg, size=n_fg, replace=False)
    n_bg = min(len(bg), max_rois - len(fg))
    if len(bg) > n_bg:
        bg = rng.choice(bg, size=n_bg, replace=False)
    chosen = np.concatenate([fg, bg]).astype(np.intp)

    class_ids = np.full(len(chosen), num_classes, dtype=np.intp)
    deltas = np.zeros((len(chosen), 4), dtype=np.float64)
    for row, idx in enumerate(chosen):
        if best_iou[idx] >= fg_iou:
            g = best_gt[idx]
            class_ids[row] = gt_class_ids[g]
            deltas[row] = encode_deltas_array(cand_arr[idx], gt_arr[g])[0]
    return RoiTargets(boxes=[candidates[i] for i in chosen],
                      class_ids=class_ids, deltas=deltas)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def _zero_scalar(dtype=np.float32) -> Tensor:
    return Tensor(np.zeros(1, dtype=dtype))


def _nll_from_probs(probs_rows: Tensor, label_cols: np.ndarray) -> Tensor:
    picked = T.gather_elems(probs_rows, np.arange(len(label_cols)), label_cols)
    return T.neg(T.mean_all(T.log(picked)))


def rpn_losses(obj_rows: Tensor, delta_rows: Tensor, targets: AnchorTargets,
               sample_idx: np.ndarray):
    """Mean cross-entropy over sampled anchors; smooth-L1 over the positives."""
    labels = targets.labels[sample_idx]
    cls = _nll_from_probs(T.gather_rows(obj_rows, sample_idx), labels.astype(np.intp))
    pos_idx = sample_idx[labels == 1]
    if len(pos_idx) == 0:
        return cls, _zero_scalar(obj_rows.dtype)
    pred = T.gather_rows(delta_rows, pos_idx)
    reg = T.mean_all(T.smooth_l1(pred, targets.deltas[pos_idx].astype(pred.dtype)))
    return cls, reg


def detector_losses(class_probs: Tensor, offsets: Tensor, rois: RoiTargets,
                    num_classes: int):
    """Mean cross-entropy over ROIs; smooth-L1 over foreground class slots only."""
    r = class_probs.shape[0]
    cls = _nll_from_probs(class_probs, rois.class_ids)
    fg = np.nonzero(rois.class_ids < num_classes)[0]
    if len(fg) == 0:
        return cls, _zero_scalar(class_probs.dtype)
    rows = np.repeat(fg, 4)
    cols = (4 * rois.class_ids[fg][:, None] + np.arange(4)[None, :]).reshape(-1)
    pred = T.gather_elems(offsets, rows, cols)
    reg = T.mean_all(T.smooth_l1(pred, rois.deltas[fg].reshape(-1).astype(pred.dtype)))
    return cls, reg


def compute_losses(rpn_outputs, detector_outputs, assignment: TargetAssignment,
                   weights: tuple = (1.0, 1.0, 1.0, 1.0), num_classes: Optional[int] = None):
    """Combine whichever stage outputs are present into a LossBreakdown.

    ``rpn_outputs`` is ``(obj_rows, delta_rows, sample_idx)`` or None;
    ``detector_outputs`` is ``(class_probs, offsets)`` or None.  Returns the
    breakdown plus the total as a tensor ready for backward().
    """
    terms = []
    vals = LossBreakdown()
    if rpn_outputs is not None:
        obj_rows, delta_rows, sample_idx = rpn_outputs
        cls, reg = rpn_losses(obj_rows, delta_rows, assignment.anchors, sample_idx)
        vals.rpn_cls, vals.rpn_reg = cls.item(), reg.item()
        terms.append(T.scale(cls, weights[0]))
        terms.append(T.scale(reg, weights[1]))
    if detector_outputs is not None:
        probs, offsets = detector_outputs
        n = num_classes if num_classes is not None else probs.shape[1] - 1
        cls, reg = detector_losses(probs, offsets, assignment.rois, n)
        vals.det_cls, vals.det_reg = cls.item(), reg.item()
        terms.append(T.scale(cls, weights[2]))
        terms.append(T.scale(reg, weights[3]))
    if not terms:
        raise T.ParameterError("compute_losses needs at least one stage's outputs")
    total = terms[0]
    for t in terms[1:]:
        total = T.add(total, t)
    vals.total = (weights[0] * vals.rpn_cls + weights[1] * vals.rpn_reg
                  + weights[2] * vals.det_cls + weights[3] * vals.det_reg)
    return vals, total


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

class AdamState:
    """First/second moment accumulators for one trainable parameter set."""

    def __init__(self, params: dict):
        self.m = {n: np.zeros_like(t.data) for n, t in params.items() if t.requires_grad}
        self.v = {n: np.zeros_like(t.data) for n, t in params.items() if t.requires_grad}
        self.t = 0


def adam_step(params: dict, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update; missing gradients count as zero.

    Any non-finite gradient aborts the step, before mutating any parameter,
    naming the offending tensor.
    """
    for name in state.m:
        g = params[name].grad
        if g is not None and not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for parameter {name!r}")
    state.t += 1
    correct1 = 1.0 - beta1 ** state.t
    correct2 = 1.0 - beta2 ** state.t
    for name in state.m:
        p = params[name]
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * np.square(g)
        mhat = m / correct1
        vhat = v / correct2
        p.data -= (lr * mhat / (np.sqrt(vhat) + eps)).astype(p.data.dtype)
        p.grad = None


# ---------------------------------------------------------------------------
# alternating schedule
# ---------------------------------------------------------------------------

@dataclass
class EpochStats:
    step: int
    epoch: int
    losses: LossBreakdown
    seconds: float


def weight_checksum(weights: ModelWeights, prefix: str = "") -> str:
    import hashlib
    h = hashlib.sha256()
    for name in sorted(weights.arrays):
        if name.startswith(prefix):
            h.update(name.encode())
            h.update(np.ascontiguousarray(weights.arrays[name]).tobytes())
    return h.hexdigest()


def _clone_arrays(weights: ModelWeights) -> ModelWeights:
    return ModelWeights(arrays={n: a.copy() for n, a in weights.arrays.items()},
                        metadata=dict(weights.metadata))


def _harvest_proposals(samples, weights, cfg: ModelConfig, post_nms: int, nms_iou: float):
    """Fixed per-image proposals from the current backbone+RPN, grads off."""
    params = params_from_weights(weights)
    anchors = cfg.anchors()
    size = cfg.backbone.input_size
    prop = ProposalParams(pre_nms_top_n=2000, post_nms_top_n=post_nms, nms_iou=nms_iou)
    out = []
    for image, _ in samples:
        feats = backbone_forward(Tensor(image[None]), params, cfg.backbone)
        obj, deltas = rpn_forward(feats, params, cfg.k)
        out.append(propose_regions(obj.data[0], deltas.data[0], anchors, (size, size), prop))
    return out


def _mean_breakdown(per_image: list) -> LossBreakdown:
    if not per_image:
        return LossBreakdown()
    out = LossBreakdown()
    for b in per_image:
        out.rpn_cls += b.rpn_cls
        out.rpn_reg += b.rpn_reg
        out.det_cls += b.det_cls
        out.det_reg += b.det_reg
        out.total += b.total
    n = len(per_image)
    out.rpn_cls /= n
    out.rpn_reg /= n
    out.det_cls /= n
    out.det_reg /= n
    out.total /= n
    return out


def alternating_train(samples: list, config: TrainConfig, progress=None):
    """Run the four-step schedule over ``samples``: (image_chw, [(class_id, Box)]).

    Returns ``(ModelWeights, [EpochStats])``.  Raises TrainingDiverged with the
    last finite-loss weights attached if the total loss leaves the reals.
    """
    if not samples:
        raise T.ParameterError("alternating_train needs a non-empty train split")
    cfg = config.model_config()
    anchors = cfg.anchors()
    seeds = np.random.SeedSequence(config.seed).spawn(6)
    rng_order = np.random.default_rng(seeds[2])
    rng_sample = np.random.default_rng(seeds[3])
    rng_dropout = np.random.default_rng(seeds[4])

    anchor_targets = [label_anchors(anchors, [b for _, b in gts],
                                    config.pos_iou, config.neg_iou)
                      for _, gts in samples]

    log: list = []
    checkpoint: Optional[ModelWeights] = None
    epoch_counter = 0

    def run_rpn_step(step_no, weights, trainable):
        nonlocal checkpoint, epoch_counter
        params = params_from_weights(weights, trainable)
        state = AdamState(params)
        for _ in range(config.epochs):
            t0 = time.perf_counter()
            order = rng_order.permutation(len(samples))
            per_image = []
            for i in order:
                image, _ = samples[i]
                feats = backbone_forward(Tensor(image[None]), params, cfg.backbone)
                obj, deltas = rpn_forward(feats, params, cfg.k)
                obj_rows, delta_rows = rpn_outputs_as_rows(obj, deltas, cfg.k)
                idx = sample_anchor_batch(anchor_targets[i], config.rpn_batch, rng_sample)
                vals, total = compute_losses(
                    (obj_rows, delta_rows, idx), None,
                    TargetAssignment(anchors=anchor_targets[i]), config.loss_weights)
                if not np.isfinite(vals.total):
                    raise TrainingDiverged(checkpoint or _clone_arrays(weights), log)
                T.backward(total)
                try:
                    adam_step(params, state, config.learning_rate,
                              config.beta1, config.beta2, config.adam_eps)
                except NonFiniteGradient as exc:
                    raise TrainingDiverged(checkpoint or _clone_arrays(weights), log) from exc
                per_image.append(vals)
            epoch_counter += 1
            log.append(EpochStats(step_no, epoch_counter, _mean_breakdown(per_image),
                                  time.perf_counter() - t0))
            checkpoint = _clone_arrays(weights)
            if progress:
                progress(log[-1], weights)

    def run_detector_step(step_no, weights, trainable, proposals):
        nonlocal checkpoint, epoch_counter
        params = params_from_weights(weights, trainable)
        state = AdamState(params)
        for _ in range(config.epochs):
            t0 = time.perf_counter()
            order = rng_order.permutation(len(samples))
            per_image = []
            for i in order:
                image, gts = samples[i]
                gt_boxes = [b for _, b in gts]
                gt_ids = [c for c, _ in gts]
                rois = assign_rois(proposals[i], gt_boxes, gt_ids, config.num_classes,
                                   rng_sample, config.roi_fg_iou,
                                   config.proposals_per_image, config.fg_fraction)
                feats = backbone_forward(Tensor(image[None]), params, cfg.backbone)
                feat = T.reshape(feats, feats.shape[1:])
                stride = cfg.backbone.stride
                extent = cfg.backbone.feature_extent
                feat_rois = []
                for b in rois.boxes:
                    fx1 = min(b.x1 / stride, extent - 1e-3)
                    fy1 = min(b.y1 / stride, extent - 1e-3)
                    feat_rois.append(Box(fx1, fy1,
                                         max(b.x2 / stride, fx1 + 1e-3),
                                         max(b.y2 / stride, fy1 + 1e-3)))
                pooled = roi_pool_batch(feat, feat_rois, *cfg.head.roi_size)
                probs, offsets = detector_forward(pooled, params, cfg.head,
                                                  config.num_classes, training=True,
                                                  rng=rng_dropout)
                vals, total = compute_losses(
                    None, (probs, offsets), TargetAssignment(rois=rois),
                    config.loss_weights, num_classes=config.num_classes)
                if not np.isfinite(vals.total):
                    raise TrainingDiverged(checkpoint or _clone_arrays(weights), log)
                T.backward(total)
                try:
                    adam_step(params, state, config.learning_rate,
                              config.beta1, config.beta2, config.adam_eps)
                except NonFiniteGradient as exc:
                    raise TrainingDiverged(checkpoint or _clone_arrays(weights), log) from exc
                per_image.append(vals)
            epoch_counter += 1
            log.append(EpochStats(step_no, epoch_counter, _mean_breakdown(per_image),
                                  time.perf_counter() - t0))
            checkpoint = _clone_arrays(weights)
            if progress:
                progress(log[-1], weights)

    # Step 1: backbone + RPN end to end.
    weights1 = init_weights(cfg, int(seeds[0].generate_state(1)[0]))
    run_rpn_step(1, weights1, ("backbone.", "rpn."))

    # Step 2: fresh backbone + detector head on step-1 proposals.
    proposals1 = _harvest_proposals(samples, weights1, cfg,
                                    config.rpn_train_post_nms, config.rpn_nms_iou)
    weights2 = init_weights(cfg, int(seeds[1].generate_state(1)[0]))
    run_detector_step(2, weights2, ("backbone.", "head."), proposals1)

    # Step 3: RPN-exclusive layers on the shared, frozen backbone.
    for name in list(weights2.arrays):
        if name.startswith("rpn."):
            weights2.arrays[name][...] = weights1.arrays[name]
    run_rpn_step(3, weights2, ("rpn.",))

    # Step 4: head-exclusive layers, shared layers frozen, fresh fixed proposals.
    proposals3 = _harvest_proposals(samples, weights2, cfg,
                                    config.rpn_train_post_nms, config.rpn_nms_iou)
    run_detector_step(4, weights2, ("head.",), proposals3)

    weights2.metadata["train_seed"] = config.seed
    return weights2, log


def write_loss_log(path, log: Sequence[EpochStats]):
    """CSV: epoch,rpn_cls,rpn_reg,det_cls,det_reg,total,seconds."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("epoch,rpn_cls,rpn_reg,det_cls,det_reg,total,seconds\n")
        for row in log:
            b = row.losses
            fh.write(f"{row.epoch},{b.rpn_cls:.6f},{b.rpn_reg:.6f},"
                     f"{b.det_cls:.6f},{b.det_reg:.6f},{b.total:.6f},{row.seconds:.3f}\n")
