"""Box geometry tests, with brute-force oracles for IoU and NMS."""

import numpy as np
import pytest

from leafdet.boxes import (Anchor, Box, Detection, anchor_boxes_array, clip_box,
                           decode_deltas, decode_deltas_array, encode_deltas,
                           encode_deltas_array, generate_anchors, iou, iou_matrix, nms)
from leafdet.tensor import ParameterError


def grid_iou_oracle(a: Box, b: Box, n=400):
    """Count-area IoU on a fine grid covering both boxes."""
    x_lo = min(a.x1, b.x1)
    x_hi = max(a.x2, b.x2)
    y_lo = min(a.y1, b.y1)
    y_hi = max(a.y2, b.y2)
    xs = np.linspace(x_lo, x_hi, n, endpoint=False) + (x_hi - x_lo) / (2 * n)
    ys = np.linspace(y_lo, y_hi, n, endpoint=False) + (y_hi - y_lo) / (2 * n)
    gx, gy = np.meshgrid(xs, ys)
    in_a = (gx >= a.x1) & (gx < a.x2) & (gy >= a.y1) & (gy < a.y2)
    in_b = (gx >= b.x1) & (gx < b.x2) & (gy >= b.y1) & (gy < b.y2)
    union = np.count_nonzero(in_a | in_b)
    if union == 0:
        return 0.0
    return np.count_nonzero(in_a & in_b) / union


def greedy_nms_oracle(dets, threshold):
    """Literal restatement of the greedy rule, kept independent of nms()."""
    remaining = sorted(range(len(dets)), key=lambda i: (-dets[i].score, dets[i].class_id))
    kept = []
    for i in remaining:
        if all(dets[i].class_id != k.class_id or iou(dets[i].box, k.box) <= threshold
               for k in kept):
            kept.append(dets[i])
    return kept


def random_box(rng, lo=0.0, hi=100.0, min_side=1.0):
    x1, y1 = rng.uniform(lo, hi - min_side, 2)
    w, h = rng.uniform(min_side, hi - max(x1, y1), 2) if hi - max(x1, y1) > min_side \
        else (min_side, min_side)
    return Box(x1, y1, x1 + w, y1 + h)


class TestBox:
    def test_degenerate_rejected(self):
        with pytest.raises(ValueError):
            Box(0, 0, 0, 10)
        with pytest.raises(ValueError):
            Box(5, 5, 4, 10)

    def test_xywh_roundtrip(self):
        b = Box(1.5, 2.5, 10.0, 20.0)
        assert Box.from_xywh(*b.to_xywh()) == b


class TestIou:
    def test_identical(self):
        b = Box(0, 0, 10, 10)
        assert iou(b, b) == 1.0

    def test_disjoint(self):
        assert iou(Box(0, 0, 1, 1), Box(5, 5, 6, 6)) == 0.0

    def test_quarter_overlap(self):
        # intersection 5x5=25, union 100+100-25=175
        assert iou(Box(0, 0, 10, 10), Box(5, 5, 15, 15)) == pytest.approx(25 / 175)

    def test_against_grid_oracle(self):
        rng = np.random.default_rng(42)
        for _ in range(60):
            a = random_box(rng)
            b = random_box(rng)
            assert iou(a, b) == pytest.approx(grid_iou_oracle(a, b), abs=1e-2)

    def test_symmetry_and_bounds(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            a = random_box(rng)
            b = random_box(rng)
            v = iou(a, b)
            assert v == iou(b, a)
            assert 0.0 <= v <= 1.0

    def test_matrix_matches_scalar(self):
        rng = np.random.default_rng(2)
        boxes_a = [random_box(rng) for _ in range(7)]
        boxes_b = [random_box(rng) for _ in range(5)]
        mat = iou_matrix(np.array([b.as_array() for b in boxes_a]),
                         np.array([b.as_array() for b in boxes_b]))
        for i, a in enumerate(boxes_a):
            for j, b in enumerate(boxes_b):
                assert mat[i, j] == pytest.approx(iou(a, b), abs=1e-12)


class TestGenerateAnchors:
    def test_count_is_w_h_k(self):
        anchors = generate_anchors(16, 16, 16, scales=[60, 120, 240], ratios=[0.5, 1, 2])
        assert len(anchors) == 16 * 16 * 9 == 2304

    def test_single_cell_construction(self):
        (a,) = generate_anchors(1, 1, 256, scales=[60], ratios=[1])
        assert a.box.center == (128.0, 128.0)
        assert a.box.width == pytest.approx(60)
        assert a.box.height == pytest.approx(60)

    def test_ratio_and_area_invariants(self):
        anchors = generate_anchors(4, 3, 32, scales=[60, 120], ratios=[0.5, 1, 2])
        for a in anchors:
            scale = [60, 120][a.scale_index]
            ratio = [0.5, 1, 2][a.ratio_index]
            assert a.box.width / a.box.height == pytest.approx(ratio, abs=1e-6)
            assert a.box.area == pytest.approx(scale ** 2, rel=0.005)

    def test_centers_on_cells(self):
        anchors = generate_anchors(3, 2, 10, scales=[8], ratios=[1])
        for a in anchors:
            assert a.box.center == ((a.feature_x + 0.5) * 10, (a.feature_y + 0.5) * 10)

    def test_ordering_cell_major_then_scale_then_ratio(self):
        anchors = generate_anchors(2, 2, 10, scales=[8, 16], ratios=[1, 2])
        k = 4
        for idx, a in enumerate(anchors):
            cell = idx // k
            assert (a.feature_y, a.feature_x) == (cell // 2, cell % 2)
            assert a.scale_index == (idx % k) // 2
            assert a.ratio_index == idx % 2

    def test_empty_scales_rejected(self):
        with pytest.raises(ParameterError):
            generate_anchors(2, 2, 10, scales=[], ratios=[1])


class TestDeltas:
    def test_identity(self):
        b = Box(0, 0, 10, 10)
        assert encode_deltas(b, b) == pytest.approx((0, 0, 0, 0))

    def test_closed_form(self):
        got = encode_deltas(Box(0, 0, 10, 10), Box(0, 0, 20, 20))
        assert got == pytest.approx((0.5, 0.5, np.log(2), np.log(2)))

    def test_decode_identity(self):
        b = Box(3, 4, 10, 12)
        got = decode_deltas(b, (0, 0, 0, 0))
        assert (got.x1, got.y1, got.x2, got.y2) == pytest.approx((b.x1, b.y1, b.x2, b.y2))

    def test_decode_closed_form(self):
        got = decode_deltas(Box(0, 0, 10, 10), (0.5, 0.5, np.log(2), np.log(2)))
        assert (got.x1, got.y1, got.x2, got.y2) == pytest.approx((0, 0, 20, 20))

    def test_roundtrip_random_pairs(self):
        rng = np.random.default_rng(3)
        for _ in range(300):
            a = random_box(rng)
            t = random_box(rng)
            back = decode_deltas(a, encode_deltas(a, t))
            assert (back.x1, back.y1, back.x2, back.y2) == pytest.approx(
                (t.x1, t.y1, t.x2, t.y2), abs=1e-4)

    def test_array_forms_match_scalar(self):
        rng = np.random.default_rng(4)
        anchors = [random_box(rng) for _ in range(20)]
        targets = [random_box(rng) for _ in range(20)]
        aa = np.array([b.as_array() for b in anchors])
        ta = np.array([b.as_array() for b in targets])
        enc = encode_deltas_array(aa, ta)
        dec = decode_deltas_array(aa, enc)
        for i in range(20):
            np.testing.assert_allclose(enc[i], encode_deltas(anchors[i], targets[i]), atol=1e-12)
            np.testing.assert_allclose(dec[i], ta[i], atol=1e-9)


class TestClipBox:
    def test_inside_unchanged(self):
        b = Box(10, 10, 50, 50)
        assert clip_box(b, 256, 256) == b

    def test_partial_clamp(self):
        assert clip_box(Box(-5, -5, 10, 10), 256, 256) == Box(0, 0, 10, 10)

    def test_fully_outside_invalid(self):
        assert clip_box(Box(300, 300, 400, 400), 256, 256) is None


class TestNms:
    def test_single_detection(self):
        d = Detection(Box(0, 0, 10, 10), 0, 0.9)
        assert nms([d], 0.5) == [d]

    def test_same_class_suppression(self):
        a = Detection(Box(0, 0, 10, 10), 0, 0.9)
        b = Detection(Box(0, 0, 10, 15), 0, 0.8)  # IoU = 100/150 > 0.3
        assert nms([a, b], 0.3) == [a]

    def test_cross_class_kept(self):
        a = Detection(Box(0, 0, 10, 10), 0, 0.9)
        b = Detection(Box(0, 0, 10, 15), 1, 0.8)
        assert nms([a, b], 0.3) == [a, b]

    def test_matches_oracle_on_random_instances(self):
        rng = np.random.default_rng(5)
        for _ in range(500):
            n = int(rng.integers(1, 11))
            dets = [Detection(random_box(rng, hi=40), int(rng.integers(0, 3)),
                              float(np.round(rng.random(), 3))) for _ in range(n)]
            thr = float(rng.uniform(0.1, 0.9))
            got = nms(dets, thr)
            want = greedy_nms_oracle(dets, thr)
            assert got == want
            # subset, ordered by score, no kept same-class pair above threshold
            scores = [d.score for d in got]
            assert scores == sorted(scores, reverse=True)
            for i, d in enumerate(got):
                assert d in dets
                for k in got[:i]:
                    if k.class_id == d.class_id:
                        assert iou(k.box, d.box) <= thr


class TestAnchorArray:
    def test_matches_boxes(self):
        anchors = generate_anchors(2, 2, 16, scales=[24], ratios=[1, 2])
        arr = anchor_boxes_array(anchors)
        for i, a in enumerate(anchors):
            np.testing.assert_allclose(arr[i], a.box.as_array())
