"""Box geometry: IoU, anchor grids, regression deltas, clipping, and NMS.

Boxes live in continuous image coordinates with corners ``(x1, y1)`` upper
left and ``(x2, y2)`` lower right; areas are ``(x2-x1)*(y2-y1)`` with no
pixel "+1" convention.  Everything here is pure and safe to call from any
number of threads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .tensor import ParameterError


@dataclass(frozen=True)
class Box:
    """Axis-aligned rectangle; zero or negative area is rejected at construction."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not (self.x2 > self.x1 and self.y2 > self.y1):
            raise ValueError(f"degenerate box ({self.x1}, {self.y1}, {self.x2}, {self.y2})")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple:
        return (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))

    def to_xywh(self) -> tuple:
        """Top-left corner plus width/height; lossless inverse of from_xywh."""
        return (self.x1, self.y1, self.width, self.height)

    @staticmethod
    def from_xywh(x: float, y: float, w: float, h: float) -> "Box":
        return Box(x, y, x + w, y + h)

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)


@dataclass(frozen=True)
class Anchor:
    """A reference box tied to one feature-map cell and one scale/ratio slot."""

    box: Box
    scale_index: int
    ratio_index: int
    feature_x: int
    feature_y: int


@dataclass(frozen=True)
class Detection:
    """A scored, classified box."""

    box: Box
    class_id: int
    score: float

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"detection score {self.score} outside [0, 1]")


def iou(a: Box, b: Box) -> float:
    """Intersection over union; 0.0 for disjoint boxes."""
    ix = min(a.x2, b.x2) - max(a.x1, b.x1)
    iy = min(a.y2, b.y2) - max(a.y1, b.y1)
    if ix <= 0.0 or iy <= 0.0:
        return 0.0
    inter = ix * iy
    return inter / (a.area + b.area - inter)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU for corner-format arrays ``a[N, 4]`` and ``b[M, 4]``."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ix = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    iy = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(ix, 0, None) * np.clip(iy, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(inter > 0, inter / union, 0.0)


def generate_anchors(feat_w: int, feat_h: int, stride: float,
                     scales: Sequence[float], ratios: Sequence[float]) -> list:
    """Tile one anchor per (cell, scale, ratio), cell-major then scale then ratio.

    Anchors are centered on their cell at ``(feature + 0.5) * stride`` and
    keep area ``scale**2`` while reshaping to ``width/height = ratio``.  They
    may extend beyond the image; clipping happens downstream.
    """
    if not scales or not ratios:
        raise ParameterError("generate_anchors needs at least one scale and one ratio")
    anchors = []
    for fy in range(feat_h):
        for fx in range(feat_w):
            cx = (fx + 0.5) * stride
            cy = (fy + 0.5) * stride
            for si, scale in enumerate(scales):
                for ri, ratio in enumerate(ratios):
                    w = scale * math.sqrt(ratio)
                    h = scale / math.sqrt(ratio)
                    box = Box(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
                    anchors.append(Anchor(box, si, ri, fx, fy))
    return anchors


def anchor_boxes_array(anchors: Sequence[Anchor]) -> np.ndarray:
    """Corner-format [N, 4] array of the anchors' boxes."""
    out = np.empty((len(anchors), 4), dtype=np.float64)
    for i, a in enumerate(anchors):
        out[i] = (a.box.x1, a.box.y1, a.box.x2, a.box.y2)
    return out


def encode_deltas(anchor: Box, target: Box) -> tuple:
    """Center/log-size offsets mapping ``anchor`` onto ``target``."""
    acx, acy = anchor.center
    tcx, tcy = target.center
    tx = (tcx - acx) / anchor.width
    ty = (tcy - acy) / anchor.height
    tw = math.log(target.width / anchor.width)
    th = math.log(target.height / anchor.height)
    return (tx, ty, tw, th)


def decode_deltas(anchor: Box, deltas: Sequence[float]) -> Box:
    """Exact inverse of :func:`encode_deltas`."""
    tx, ty, tw, th = deltas
    acx, acy = anchor.center
    cx = acx + tx * anchor.width
    cy = acy + ty * anchor.height
    w = anchor.width * math.exp(tw)
    h = anchor.height * math.exp(th)
    return Box(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)


def encode_deltas_array(anchors: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Vectorized encode for matched corner-format arrays [N, 4]."""
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    targets = np.asarray(targets, dtype=np.float64).reshape(-1, 4)
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    acx = anchors[:, 0] + 0.5 * aw
    acy = anchors[:, 1] + 0.5 * ah
    tw = targets[:, 2] - targets[:, 0]
    th = targets[:, 3] - targets[:, 1]
    tcx = targets[:, 0] + 0.5 * tw
    tcy = targets[:, 1] + 0.5 * th
    return np.stack([(tcx - acx) / aw, (tcy - acy) / ah,
                     np.log(tw / aw), np.log(th / ah)], axis=1)


def decode_deltas_array(anchors: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    """Vectorized decode; returns corner-format [N, 4]."""
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    deltas = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    acx = anchors[:, 0] + 0.5 * aw
    acy = anchors[:, 1] + 0.5 * ah
    cx = acx + deltas[:, 0] * aw
    cy = acy + deltas[:, 1] * ah
    w = aw * np.exp(deltas[:, 2])
    h = ah * np.exp(deltas[:, 3])
    return np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=1)


def clip_box(box: Box, width: float, height: float) -> Optional[Box]:
    """Clamp to ``[0, width] x [0, height]``; None if the area collapses."""
    x1 = min(max(box.x1, 0.0), width)
    y1 = min(max(box.y1, 0.0), height)
    x2 = min(max(box.x2, 0.0), width)
    y2 = min(max(box.y2, 0.0), height)
    if x2 <= x1 or y2 <= y1:
        return None
    return Box(x1, y1, x2, y2)


def nms(dets: Sequence[Detection], iou_threshold: float) -> list:
    """Greedy per-class non-maximum suppression.

    Candidates are visited by descending score (ties: lower class_id first,
    then input order) and kept iff their IoU with every already-kept
    detection of the same class is at or below the threshold.
    """
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, dets[i].class_id))
    kept: list = []
    for i in order:
        d = dets[i]
        ok = True
        for k in kept:
            if k.class_id == d.class_id and iou(k.box, d.box) > iou_threshold:
                ok = False
                break
        if ok:
            kept.append(d)
    return kept
