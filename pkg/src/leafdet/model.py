"""Network definitions: VGG-style backbone, region-proposal head, ROI pooling,
inception-based detector head, weight initialization and parameter counting.

All forward passes are pure functions over a ``dict[str, Tensor]`` parameter
map, so inference can run concurrently on read-only weights while training
owns a single mutable copy.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .boxes import (Anchor, Box, Detection, anchor_boxes_array, clip_box,
                    decode_deltas_array, generate_anchors, nms)
from .tensor import ContractError, DimensionError, Tensor


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BackboneConfig:
    """Stacked 3x3 conv stages with optional 2x2/stride-2 pooling after each."""

    stage_convs: tuple = (2, 2, 3, 3, 3)
    stage_widths: tuple = (64, 128, 256, 512, 512)
    pool_after: tuple = (True, True, True, True, False)
    input_size: int = 256
    in_channels: int = 3

    def __post_init__(self):
        if len(self.stage_convs) != len(self.stage_widths) or len(self.stage_convs) != len(self.pool_after):
            raise T.ParameterError("backbone stage lists must have equal length")
        if self.input_size % self.stride != 0:
            raise T.ParameterError(
                f"input size {self.input_size} not divisible by downsampling factor {self.stride}")

    @property
    def stride(self) -> int:
        return 2 ** sum(self.pool_after)

    @property
    def feature_extent(self) -> int:
        return self.input_size // self.stride

    @property
    def out_channels(self) -> int:
        return self.stage_widths[-1]


def vgg16_backbone(input_size: int = 256, width_divisor: int = 1) -> BackboneConfig:
    """The canonical 13-conv stack, optionally width-reduced for desk-scale runs."""
    widths = tuple(max(1, w // width_divisor) for w in (64, 128, 256, 512, 512))
    return BackboneConfig(stage_convs=(2, 2, 3, 3, 3), stage_widths=widths,
                          pool_after=(True, True, True, True, False), input_size=input_size)


def vgg19_backbone(input_size: int = 256, width_divisor: int = 1) -> BackboneConfig:
    widths = tuple(max(1, w // width_divisor) for w in (64, 128, 256, 512, 512))
    return BackboneConfig(stage_convs=(2, 2, 4, 4, 4), stage_widths=widths,
                          pool_after=(True, True, True, True, False), input_size=input_size)


@dataclass(frozen=True)
class InceptionConfig:
    """Branch output widths: 1x1, 1x1->3x3, 1x1->5x5, 3x3 maxpool->1x1."""

    b1: int = 128
    b2_reduce: int = 64
    b2: int = 128
    b3_reduce: int = 32
    b3: int = 64
    b4: int = 64

    @property
    def out_channels(self) -> int:
        return self.b1 + self.b2 + self.b3 + self.b4

    def scaled(self, divisor: int) -> "InceptionConfig":
        return InceptionConfig(*(max(1, v // divisor) for v in
                                 (self.b1, self.b2_reduce, self.b2, self.b3_reduce, self.b3, self.b4)))


@dataclass(frozen=True)
class HeadConfig:
    """Two inception modules, one hidden FC layer, two sibling outputs."""

    inception1: InceptionConfig = field(default_factory=InceptionConfig)
    inception2: InceptionConfig = field(default_factory=InceptionConfig)
    fc_units: int = 1024
    roi_size: tuple = (7, 7)
    dropout_rate: float = 0.5


@dataclass(frozen=True)
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    rpn_channels: int = 512
    anchor_scales: tuple = (60.0, 120.0, 240.0)
    anchor_ratios: tuple = (0.5, 1.0, 2.0)
    num_classes: int = 10

    @property
    def k(self) -> int:
        return len(self.anchor_scales) * len(self.anchor_ratios)

    def anchors(self) -> list:
        fe = self.backbone.feature_extent
        return generate_anchors(fe, fe, self.backbone.stride,
                                self.anchor_scales, self.anchor_ratios)

    def config_hash(self) -> str:
        blob = json.dumps(_config_dict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _config_dict(cfg: ModelConfig) -> dict:
    return {
        "backbone": {"stage_convs": list(cfg.backbone.stage_convs),
                     "stage_widths": list(cfg.backbone.stage_widths),
                     "pool_after": list(cfg.backbone.pool_after),
                     "input_size": cfg.backbone.input_size,
                     "in_channels": cfg.backbone.in_channels},
        "head": {"inception1": vars(cfg.head.inception1) if not isinstance(cfg.head.inception1, InceptionConfig)
                 else {k: getattr(cfg.head.inception1, k) for k in ("b1", "b2_reduce", "b2", "b3_reduce", "b3", "b4")},
                 "inception2": {k: getattr(cfg.head.inception2, k) for k in ("b1", "b2_reduce", "b2", "b3_reduce", "b3", "b4")},
                 "fc_units": cfg.head.fc_units,
                 "roi_size": list(cfg.head.roi_size),
                 "dropout_rate": cfg.head.dropout_rate},
        "rpn_channels": cfg.rpn_channels,
        "anchor_scales": list(cfg.anchor_scales),
        "anchor_ratios": list(cfg.anchor_ratios),
        "num_classes": cfg.num_classes,
    }


def default_model_config(num_classes: int, input_size: int = 256, width_divisor: int = 1,
                         anchor_scales: Sequence[float] = (60.0, 120.0, 240.0),
                         anchor_ratios: Sequence[float] = (0.5, 1.0, 2.0),
                         roi_size: tuple = (7, 7), dropout_rate: float = 0.5) -> ModelConfig:
    """Paper-scale architecture, optionally width-divided for CPU-scale runs."""
    inc = InceptionConfig().scaled(width_divisor)
    head = HeadConfig(inception1=inc, inception2=inc,
                      fc_units=max(4, 1024 // width_divisor),
                      roi_size=tuple(roi_size), dropout_rate=dropout_rate)
    return ModelConfig(backbone=vgg16_backbone(input_size, width_divisor), head=head,
                       rpn_channels=max(4, 512 // width_divisor),
                       anchor_scales=tuple(float(s) for s in anchor_scales),
                       anchor_ratios=tuple(float(r) for r in anchor_ratios),
                       num_classes=num_classes)


# ---------------------------------------------------------------------------
# parameter shapes, initialization, counting
# ---------------------------------------------------------------------------

def backbone_param_shapes(cfg: BackboneConfig) -> dict:
    shapes = {}
    cin = cfg.in_channels
    for si, (n, width) in enumerate(zip(cfg.stage_convs, cfg.stage_widths)):
        for ci in range(n):
            shapes[f"backbone.s{si}.c{ci}.weight"] = (width, cin, 3, 3)
            shapes[f"backbone.s{si}.c{ci}.bias"] = (width,)
            cin = width
    return shapes


def rpn_param_shapes(in_channels: int, rpn_channels: int, k: int) -> dict:
    return {
        "rpn.conv1.weight": (rpn_channels, in_channels, 3, 3),
        "rpn.conv1.bias": (rpn_channels,),
        "rpn.conv2.weight": (rpn_channels, rpn_channels, 3, 3),
        "rpn.conv2.bias": (rpn_channels,),
        "rpn.cls.weight": (2 * k, rpn_channels, 1, 1),
        "rpn.cls.bias": (2 * k,),
        "rpn.reg.weight": (4 * k, rpn_channels, 1, 1),
        "rpn.reg.bias": (4 * k,),
    }


def _inception_shapes(prefix: str, cin: int, inc: InceptionConfig) -> dict:
    return {
        f"{prefix}.b1.weight": (inc.b1, cin, 1, 1), f"{prefix}.b1.bias": (inc.b1,),
        f"{prefix}.b2r.weight": (inc.b2_reduce, cin, 1, 1), f"{prefix}.b2r.bias": (inc.b2_reduce,),
        f"{prefix}.b2.weight": (inc.b2, inc.b2_reduce, 3, 3), f"{prefix}.b2.bias": (inc.b2,),
        f"{prefix}.b3r.weight": (inc.b3_reduce, cin, 1, 1), f"{prefix}.b3r.bias": (inc.b3_reduce,),
        f"{prefix}.b3.weight": (inc.b3, inc.b3_reduce, 5, 5), f"{prefix}.b3.bias": (inc.b3,),
        f"{prefix}.b4.weight": (inc.b4, cin, 1, 1), f"{prefix}.b4.bias": (inc.b4,),
    }


def head_param_shapes(head: HeadConfig, in_channels: int, num_classes: int) -> dict:
    shapes = {}
    shapes.update(_inception_shapes("head.inc1", in_channels, head.inception1))
    shapes.update(_inception_shapes("head.inc2", head.inception1.out_channels, head.inception2))
    flat = head.inception2.out_channels * head.roi_size[0] * head.roi_size[1]
    shapes["head.fc.weight"] = (flat, head.fc_units)
    shapes["head.fc.bias"] = (head.fc_units,)
    shapes["head.cls.weight"] = (head.fc_units, num_classes + 1)
    shapes["head.cls.bias"] = (num_classes + 1,)
    shapes["head.reg.weight"] = (head.fc_units, 4 * num_classes)
    shapes["head.reg.bias"] = (4 * num_classes,)
    return shapes


def fc_head_param_shapes(in_channels: int, roi_size: tuple, num_classes: int,
                         fc_units: int = 4096, fc_layers: int = 2) -> dict:
    """The fully-connected detector head this architecture replaces; counting only."""
    shapes = {}
    width = in_channels * roi_size[0] * roi_size[1]
    for i in range(fc_layers):
        shapes[f"fchead.fc{i}.weight"] = (width, fc_units)
        shapes[f"fchead.fc{i}.bias"] = (fc_units,)
        width = fc_units
    shapes["fchead.cls.weight"] = (width, num_classes + 1)
    shapes["fchead.cls.bias"] = (num_classes + 1,)
    shapes["fchead.reg.weight"] = (width, 4 * num_classes)
    shapes["fchead.reg.bias"] = (4 * num_classes,)
    return shapes


def model_param_shapes(cfg: ModelConfig) -> dict:
    shapes = backbone_param_shapes(cfg.backbone)
    shapes.update(rpn_param_shapes(cfg.backbone.out_channels, cfg.rpn_channels, cfg.k))
    shapes.update(head_param_shapes(cfg.head, cfg.backbone.out_channels, cfg.num_classes))
    return shapes


@dataclass
class ModelWeights:
    """Named, shaped float32 arrays plus provenance metadata."""

    arrays: dict
    metadata: dict

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.arrays):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.arrays[name]).tobytes())
        return h.hexdigest()


def init_weights(cfg: ModelConfig, seed: int) -> ModelWeights:
    """Seeded He-normal init; output layers get a small standard deviation."""
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, shape in model_param_shapes(cfg).items():
        if name.endswith(".bias"):
            arrays[name] = np.zeros(shape, dtype=np.float32)
        elif name.split(".")[-2] in ("cls", "reg"):
            arrays[name] = (rng.standard_normal(shape) * 0.01).astype(np.float32)
        else:
            fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
            std = np.sqrt(2.0 / fan_in)
            arrays[name] = (rng.standard_normal(shape) * std).astype(np.float32)
    meta = {"config_hash": cfg.config_hash(), "num_classes": cfg.num_classes, "seed": seed}
    return ModelWeights(arrays=arrays, metadata=meta)


def count_parameters(weights) -> int:
    """Total scalar count over a ModelWeights, an array map, or a shape map."""
    if isinstance(weights, ModelWeights):
        weights = weights.arrays
    total = 0
    for v in weights.values():
        total += int(np.prod(v.shape)) if hasattr(v, "shape") else int(np.prod(v))
    return total


def params_from_weights(weights: ModelWeights, trainable=()) -> dict:
    """Wrap weight arrays as tensors; names matching a ``trainable`` prefix get grads.

    ``trainable=True`` marks everything trainable.  Tensors share storage with
    the ModelWeights arrays, so optimizer updates write straight through.
    """
    params = {}
    for name, arr in weights.arrays.items():
        if trainable is True:
            req = True
        else:
            req = any(name.startswith(p) for p in trainable)
        t = Tensor.__new__(Tensor)
        t.data = arr
        t.requires_grad = req
        t.grad = None
        t._parents = ()
        t._backward = None
        params[name] = t
    return params


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------

def backbone_forward(x: Tensor, params: dict, cfg: BackboneConfig) -> Tensor:
    """Image batch [N, 3, S, S] -> feature map [N, C, S/stride, S/stride]."""
    n, c, h, w = x.shape
    if c != cfg.in_channels or h != cfg.input_size or w != cfg.input_size:
        raise DimensionError(
            f"backbone expects [N, {cfg.in_channels}, {cfg.input_size}, {cfg.input_size}], got {x.shape}")
    out = x
    for si, (nconv, _) in enumerate(zip(cfg.stage_convs, cfg.stage_widths)):
        for ci in range(nconv):
            out = T.relu(T.conv2d(out, params[f"backbone.s{si}.c{ci}.weight"],
                                  params[f"backbone.s{si}.c{ci}.bias"], stride=1, padding=1))
        if cfg.pool_after[si]:
            out = T.maxpool2d(out, 2, 2)
    return out


def _pairwise_softmax(logits: Tensor, k: int) -> Tensor:
    """Softmax each (background, foreground) channel pair of [N, 2k, H, W]."""
    n, c, h, w = logits.shape
    t = T.reshape(logits, (n, k, 2, h, w))
    t = T.transpose(t, (0, 1, 3, 4, 2))
    t = T.softmax(t)
    t = T.transpose(t, (0, 1, 4, 2, 3))
    return T.reshape(t, (n, 2 * k, h, w))


def rpn_forward(features: Tensor, params: dict, k: int):
    """Two shared 3x3 conv layers, then 1x1 objectness and delta branches.

    Returns ``(objectness, deltas)`` of shapes [N, 2k, H, W] and [N, 4k, H, W];
    each anchor's (bg, fg) objectness pair is softmax-normalized.
    """
    if k < 1:
        raise T.ParameterError(f"k must be >= 1, got {k}")
    h = T.relu(T.conv2d(features, params["rpn.conv1.weight"], params["rpn.conv1.bias"], padding=1))
    h = T.relu(T.conv2d(h, params["rpn.conv2.weight"], params["rpn.conv2.bias"], padding=1))
    cls_logits = T.conv2d(h, params["rpn.cls.weight"], params["rpn.cls.bias"])
    deltas = T.conv2d(h, params["rpn.reg.weight"], params["rpn.reg.bias"])
    return _pairwise_softmax(cls_logits, k), deltas


def flatten_rpn_outputs(objectness: np.ndarray, deltas: np.ndarray, k: int):
    """Per-anchor (fg score, 4 deltas) in generate_anchors order (cell-major, then slot).

    Accepts the [2k, H, W] / [4k, H, W] maps of a single image.
    """
    _, h, w = objectness.shape
    fg = objectness.reshape(k, 2, h, w)[:, 1]                # [k, H, W]
    scores = fg.transpose(1, 2, 0).reshape(-1)               # cell-major, anchor slot last
    dl = deltas.reshape(k, 4, h, w).transpose(2, 3, 0, 1).reshape(-1, 4)
    return scores, dl


def rpn_outputs_as_rows(objectness: Tensor, deltas: Tensor, k: int):
    """Tensor-space version of flatten_rpn_outputs, for loss assembly.

    Returns objectness rows [H*W*k, 2] (bg, fg) and delta rows [H*W*k, 4].
    """
    n, c, h, w = objectness.shape
    obj = T.reshape(objectness, (k, 2, h, w))
    obj = T.transpose(obj, (2, 3, 0, 1))
    obj_rows = T.reshape(obj, (h * w * k, 2))
    dl = T.reshape(deltas, (k, 4, h, w))
    dl = T.transpose(dl, (2, 3, 0, 1))
    dl_rows = T.reshape(dl, (h * w * k, 4))
    return obj_rows, dl_rows


@dataclass(frozen=True)
class ProposalParams:
    pre_nms_top_n: int = 2000
    post_nms_top_n: int = 300
    nms_iou: float = 0.7


def propose_regions(objectness: np.ndarray, deltas: np.ndarray, anchors: Sequence[Anchor],
                    image_size: tuple, params: ProposalParams) -> list:
    """Decode, clip, rank and suppress anchors into at most post_nms_top_n boxes.

    Never returns an empty list: if nothing survives, the whole image is the
    single fallback proposal so downstream training cannot stall.
    """
    k = objectness.shape[0] // 2
    scores, dl = flatten_rpn_outputs(objectness, deltas, k)
    if len(scores) != len(anchors):
        raise DimensionError(f"{len(scores)} RPN scores vs {len(anchors)} anchors")
    width, height = image_size

    decoded = decode_deltas_array(anchor_boxes_array(anchors), dl)
    decoded[:, 0::2] = np.clip(decoded[:, 0::2], 0.0, width)
    decoded[:, 1::2] = np.clip(decoded[:, 1::2], 0.0, height)
    valid = (decoded[:, 2] > decoded[:, 0]) & (decoded[:, 3] > decoded[:, 1])

    order = np.argsort(-scores, kind="stable")
    order = order[valid[order]][:params.pre_nms_top_n]
    dets = [Detection(Box(*decoded[i]), 0, float(np.clip(scores[i], 0.0, 1.0))) for i in order]
    kept = nms(dets, params.nms_iou)[:params.post_nms_top_n]
    if not kept:
        return [Box(0.0, 0.0, float(width), float(height))]
    return [d.box for d in kept]


def roi_pool(features: Tensor, roi: Box, out_h: int, out_w: int) -> Tensor:
    """Max-pool a feature-coordinate ROI of [C, Hf, Wf] into a [C, out_h, out_w] grid.

    Cell boundaries sit at round(i * extent / out); a cell that would be empty
    borrows the nearest covered column/row so every output is defined.
    Backward routes each cell's gradient to its first (row-major) argmax.
    """
    c, hf, wf = features.shape
    x_start = max(0, int(np.floor(roi.x1)))
    y_start = max(0, int(np.floor(roi.y1)))
    x_end = min(wf, int(np.ceil(roi.x2)))
    y_end = min(hf, int(np.ceil(roi.y2)))
    if x_end <= x_start or y_end <= y_start:
        raise ContractError(f"roi {roi} lies outside feature map {(hf, wf)}")
    rw, rh = x_end - x_start, y_end - y_start

    def bounds(extent, out, offset):
        cuts = [offset + int(np.floor(i * extent / out + 0.5)) for i in range(out + 1)]
        cells = []
        for i in range(out):
            a, b = cuts[i], cuts[i + 1]
            if b <= a:  # sub-cell roi: borrow the nearest covered index
                a = min(a, offset + extent - 1)
                b = a + 1
            cells.append((a, b))
        return cells

    ycells = bounds(rh, out_h, y_start)
    xcells = bounds(rw, out_w, x_start)

    data = np.empty((c, out_h, out_w), dtype=features.dtype)
    argpos = np.empty((c, out_h, out_w, 2), dtype=np.intp)
    src = features.data
    for i, (ya, yb) in enumerate(ycells):
        for j, (xa, xb) in enumerate(xcells):
            sub = src[:, ya:yb, xa:xb].reshape(c, -1)
            am = sub.argmax(axis=1)
            data[:, i, j] = sub[np.arange(c), am]
            sy, sx = np.divmod(am, xb - xa)
            argpos[:, i, j, 0] = ya + sy
            argpos[:, i, j, 1] = xa + sx

    def bwd(g):
        gx = np.zeros_like(src)
        ci = np.repeat(np.arange(c), out_h * out_w)
        np.add.at(gx, (ci, argpos[..., 0].ravel(), argpos[..., 1].ravel()), g.ravel())
        return (gx,)

    return T._from_op(data, (features,), bwd)


def roi_pool_batch(features: Tensor, rois: Sequence[Box], out_h: int, out_w: int) -> Tensor:
    """Stack roi_pool over many ROIs into [R, C, out_h, out_w]."""
    pooled = [roi_pool(features, r, out_h, out_w) for r in rois]
    data = np.stack([p.data for p in pooled])

    def bwd(g):
        return tuple(g[i] for i in range(len(pooled)))

    return T._from_op(data, pooled, bwd)


def inception_forward(x: Tensor, cfg: InceptionConfig, params: dict, prefix: str) -> Tensor:
    """Four parallel branches, ReLU after every conv, channel-concatenated."""
    def conv(t, name, padding=0):
        return T.relu(T.conv2d(t, params[f"{prefix}.{name}.weight"],
                               params[f"{prefix}.{name}.bias"], padding=padding))

    b1 = conv(x, "b1")
    b2 = conv(conv(x, "b2r"), "b2", padding=1)
    b3 = conv(conv(x, "b3r"), "b3", padding=2)
    b4 = conv(T.maxpool2d(x, 3, 1, padding=1), "b4")
    return T.concat_channels([b1, b2, b3, b4])


def detector_forward(pooled: Tensor, params: dict, head: HeadConfig, num_classes: int,
                     training: bool = False, rng: Optional[np.random.Generator] = None):
    """Pooled ROIs [R, C, H, W] -> (class probabilities [R, N+1], offsets [R, 4N])."""
    r = pooled.shape[0]
    if r < 1:
        raise T.ParameterError("detector_forward needs at least one ROI")
    h = inception_forward(pooled, head.inception1, params, "head.inc1")
    h = inception_forward(h, head.inception2, params, "head.inc2")
    h = T.reshape(h, (r, -1))
    h = T.relu(T.fully_connected(h, params["head.fc.weight"], params["head.fc.bias"]))
    if training and head.dropout_rate > 0.0:
        if rng is None:
            raise T.ParameterError("training-mode detector_forward needs an rng for dropout")
        h = T.dropout(h, head.dropout_rate, training=True, rng=rng)
    class_probs = T.softmax(T.fully_connected(h, params["head.cls.weight"], params["head.cls.bias"]))
    offsets = T.fully_connected(h, params["head.reg.weight"], params["head.reg.bias"])
    return class_probs, offsets


# ---------------------------------------------------------------------------
# whole-model inference
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DetectParams:
    score_threshold: float = 0.05
    nms_iou: float = 0.3
    max_detections: int = 20


def detect_image(image: np.ndarray, params: dict, cfg: ModelConfig,
                 anchors: Optional[Sequence[Anchor]] = None,
                 proposal: ProposalParams = ProposalParams(),
                 detect: DetectParams = DetectParams(),
                 class_thresholds: Optional[dict] = None) -> list:
    """Run the full pipeline on one [3, S, S] image; returns NMS-filtered detections.

    ``class_thresholds`` maps class_id to a minimum score; classes not listed
    keep the global threshold.
    """
    if anchors is None:
        anchors = cfg.anchors()
    size = cfg.backbone.input_size
    x = Tensor(image[None].astype(np.float32))
    features = backbone_forward(x, params, cfg.backbone)
    objectness, deltas = rpn_forward(features, params, cfg.k)
    proposals = propose_regions(objectness.data[0], deltas.data[0], anchors,
                                (size, size), proposal)

    stride = cfg.backbone.stride
    extent = cfg.backbone.feature_extent
    feat = T.reshape(features, features.shape[1:])
    rois, keep_boxes = [], []
    for p in proposals:
        fb = clip_box(Box(p.x1 / stride, p.y1 / stride, p.x2 / stride, p.y2 / stride),
                      extent, extent)
        if fb is not None:
            rois.append(fb)
            keep_boxes.append(p)
    if not rois:
        return []

    pooled = roi_pool_batch(feat, rois, *cfg.head.roi_size)
    probs, offsets = detector_forward(pooled, params, cfg.head, cfg.num_classes, training=False)
    probs = probs.data
    offsets = offsets.data

    n = cfg.num_classes
    dets = []
    for i, pbox in enumerate(keep_boxes):
        c = int(np.argmax(probs[i, :n]))
        score = float(probs[i, c])
        if score < detect.score_threshold:
            continue
        decoded = decode_deltas_array(pbox.as_array(), offsets[i, 4 * c:4 * c + 4])[0]
        clipped = clip_box(Box(*decoded), size, size) if decoded[2] > decoded[0] and decoded[3] > decoded[1] else None
        if clipped is None:
            continue
        dets.append(Detection(clipped, c, min(score, 1.0)))

    kept = nms(dets, detect.nms_iou)
    if class_thresholds:
        kept = [d for d in kept if d.score >= class_thresholds.get(d.class_id, detect.score_threshold)]
    return kept[:detect.max_detections]
